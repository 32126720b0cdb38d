//! Heatmap-mesh pair records: generation, shards, streaming and import.
//!
//! A record stores the compact pre-image of a training pair (2D joints,
//! visibility, 3D joints and meshes); heatmaps are synthesized when a sample
//! is prepared. Shards are [`container`](crate::container) files of kind
//! [`FileKind::Shard`] whose first record is the camera rig (`RIG_`),
//! followed by `PAIR` records.

use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use nalgebra::Matrix3;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::body::{normalize_mesh, BodyModel, MeshSample, NormalizeOptions, Pose, Vec3};
use crate::camera::{project_perspective, rig_for_views, CameraRig, PinholeCamera, Vec2};
use crate::container::{self, tag, ContainerWriter, Decoder, Encoder, FileKind, Header, Record, RecordLocation};
use crate::heatmap::{augment, synthesize, tokenize, Augmentation, TokenGrid};
use crate::rng;
use crate::{Error, Result};

pub const RECORDS_PER_SHARD: usize = 100_000;
/// Pose resamples before a mesh is skipped for leaving the frame.
pub const FRUSTUM_ATTEMPTS: usize = 8;
const FULL_VERTICES_FLAG: u32 = 1;
const GENERATE_CHUNK: usize = 256;

/// One heatmap-mesh pair as stored on disk. Positions are world-frame meters
/// with the mesh centered at the origin; 2D joints are pixels of camera
/// `camera_id` of the shard's rig.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub mesh_index: u64,
    pub pose_seed: u64,
    pub camera_id: u32,
    pub joints2d: Vec<[f32; 2]>,
    pub visibility: Vec<bool>,
    pub joints3d: Vec<[f32; 3]>,
    pub coarse_vertices: Vec<[f32; 3]>,
    pub full_vertices: Option<Vec<[f32; 3]>>,
}

/// Record dimensions shared by every record of a shard set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub joints: usize,
    pub coarse_vertices: usize,
    pub full_vertices: usize,
}

impl Dims {
    pub fn of_body(body: &BodyModel) -> Self {
        Self {
            joints: body.joint_count(),
            coarse_vertices: body.coarse_vertex_count(),
            full_vertices: body.full_vertex_count(),
        }
    }

    fn of_header(h: &Header) -> Self {
        Self {
            joints: h.joints as usize,
            coarse_vertices: h.coarse_vertices as usize,
            full_vertices: h.full_vertices as usize,
        }
    }
}

fn points_f32(points: &[Vec3]) -> Vec<[f32; 3]> {
    points.iter().map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect()
}

pub fn to_vec3(points: &[[f32; 3]]) -> Vec<Vec3> {
    points.iter().map(|p| Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect()
}

impl PairRecord {
    /// Payload layout (little-endian):
    /// `mesh_index u64, pose_seed u64, camera_id u32, flags u32,
    /// joints2d K*2 f32, visibility K u8, joints3d K*3 f32,
    /// coarse M_coarse*3 f32, [full M_full*3 f32 if flags & 1]`.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.mesh_index)
            .u64(self.pose_seed)
            .u32(self.camera_id)
            .u32(if self.full_vertices.is_some() { FULL_VERTICES_FLAG } else { 0 });
        self.joints2d.iter().for_each(|p| {
            e.f32s(p);
        });
        self.visibility.iter().for_each(|&v| {
            e.u8(v as u8);
        });
        for p in self.joints3d.iter().chain(&self.coarse_vertices).chain(self.full_vertices.iter().flatten()) {
            e.f32s(p);
        }
        e.finish()
    }

    pub fn decode(payload: &[u8], dims: Dims) -> Result<Self> {
        let mut d = Decoder::new(payload);
        let mesh_index = d.u64()?;
        let pose_seed = d.u64()?;
        let camera_id = d.u32()?;
        let flags = d.u32()?;
        let k = dims.joints;
        let pairs = |v: Vec<f32>| v.chunks_exact(2).map(|c| [c[0], c[1]]).collect::<Vec<_>>();
        let triples = |v: Vec<f32>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let joints2d = pairs(d.f32s(k * 2)?);
        let visibility = d.take(k)?.iter().map(|&b| b != 0).collect();
        let joints3d = triples(d.f32s(k * 3)?);
        let coarse_vertices = triples(d.f32s(dims.coarse_vertices * 3)?);
        let full_vertices = if flags & FULL_VERTICES_FLAG != 0 {
            Some(triples(d.f32s(dims.full_vertices * 3)?))
        } else {
            None
        };
        d.finish()?;
        Ok(Self {
            mesh_index,
            pose_seed,
            camera_id,
            joints2d,
            visibility,
            joints3d,
            coarse_vertices,
            full_vertices,
        })
    }

    pub fn joints2d_vec(&self) -> Vec<Vec2> {
        self.joints2d.iter().map(|p| Vec2::new(p[0] as f64, p[1] as f64)).collect()
    }
}

/// Rig payload: `count u32, rig_seed u64`, then per camera
/// `rotation 9 f64 (row-major), translation 3 f64, focal 2 f64,
/// principal_point 2 f64, width u32, height u32`.
pub fn encode_rig(rig: &CameraRig) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(rig.cameras.len() as u32).u64(rig.rig_seed);
    for c in &rig.cameras {
        for r in 0..3 {
            for col in 0..3 {
                e.f64(c.rotation[(r, col)]);
            }
        }
        for v in c.translation.iter().chain(&c.focal).chain(&c.principal_point) {
            e.f64(*v);
        }
        e.u32(c.image_size.0 as u32).u32(c.image_size.1 as u32);
    }
    e.finish()
}

pub fn decode_rig(payload: &[u8]) -> Result<CameraRig> {
    let mut d = Decoder::new(payload);
    let n = d.u32()? as usize;
    let rig_seed = d.u64()?;
    let mut cameras = Vec::with_capacity(n.min(64));
    for _ in 0..n {
        let mut rot = [0.0; 9];
        for v in &mut rot {
            *v = d.f64()?;
        }
        let translation = Vec3::new(d.f64()?, d.f64()?, d.f64()?);
        let focal = [d.f64()?, d.f64()?];
        let principal_point = [d.f64()?, d.f64()?];
        let image_size = (d.u32()? as usize, d.u32()? as usize);
        cameras.push(PinholeCamera {
            rotation: Matrix3::from_row_slice(&rot),
            translation,
            focal,
            principal_point,
            image_size,
        });
    }
    d.finish()?;
    Ok(CameraRig { cameras, rig_seed })
}

/// Project and flag joints inside the image.
fn project_joints(camera: &PinholeCamera, joints: &[Vec3]) -> (Vec<[f32; 2]>, Vec<bool>) {
    project_perspective(camera, joints)
        .into_iter()
        .map(|p| match p {
            Some(p) => ([p.x as f32, p.y as f32], camera.contains(&p)),
            None => ([f32::NAN, f32::NAN], false),
        })
        .unzip()
}

/// A view is usable when the pelvis is in the image and at least half the
/// joints are.
fn view_ok(visibility: &[bool], joints2d: &[[f32; 2]], camera: &PinholeCamera) -> bool {
    let k = visibility.len();
    let visible = visibility.iter().filter(|&&v| v).count();
    let pelvis = if k == 17 {
        let (a, b) = (joints2d[crate::body::HIP_JOINTS[0]], joints2d[crate::body::HIP_JOINTS[1]]);
        Vec2::new((a[0] + b[0]) as f64 / 2.0, (a[1] + b[1]) as f64 / 2.0)
    } else {
        Vec2::new(camera.principal_point[0], camera.principal_point[1])
    };
    2 * visible >= k && camera.contains(&pelvis)
}

/// Build a record for one normalized mesh seen by one camera. 3D positions
/// are rounded to `f32` before projecting so stored 2D joints reproject
/// exactly from stored 3D joints.
pub fn make_record(
    sample: &MeshSample,
    coarse_indices: &[usize],
    rig: &CameraRig,
    camera_id: usize,
    mesh_index: u64,
    store_full: bool,
) -> PairRecord {
    let joints3d = points_f32(&sample.joints3d);
    let (joints2d, visibility) = project_joints(&rig.cameras[camera_id], &to_vec3(&joints3d));
    let coarse: Vec<Vec3> = coarse_indices.iter().map(|&i| sample.vertices3d[i]).collect();
    PairRecord {
        mesh_index,
        pose_seed: sample.source_id,
        camera_id: camera_id as u32,
        joints2d,
        visibility,
        joints3d,
        coarse_vertices: points_f32(&coarse),
        full_vertices: store_full.then(|| points_f32(&sample.vertices3d)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateMode {
    /// One record per (mesh, camera).
    Enumerate,
    /// One uniformly chosen camera per mesh.
    Sample,
}

impl std::str::FromStr for GenerateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enumerate" => Ok(GenerateMode::Enumerate),
            "sample" => Ok(GenerateMode::Sample),
            _ => Err(Error::config(format!("unknown generation mode `{s}` (enumerate, sample)"))),
        }
    }
}

/// Disjoint mesh-seed partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    HeldOut = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub meshes: usize,
    pub views: usize,
    pub seed: u64,
    pub mode: GenerateMode,
    pub split: Split,
    pub store_full: bool,
    pub records_per_shard: usize,
    pub normalize: NormalizeOptions,
}

impl GenerateOptions {
    pub fn new(meshes: usize, views: usize, seed: u64) -> Self {
        Self {
            meshes,
            views,
            seed,
            mode: GenerateMode::Enumerate,
            split: Split::Train,
            store_full: false,
            records_per_shard: RECORDS_PER_SHARD,
            normalize: NormalizeOptions::default(),
        }
    }
}

/// Seed of mesh `index`, pose attempt `attempt`, in a split.
pub fn mesh_seed(seed: u64, split: Split, index: u64, attempt: usize) -> u64 {
    rng::derive(seed, &[rng::stream::SPLIT, split as u64, index, attempt as u64])
}

/// Records for one mesh, or `None` when every attempt left the frame.
fn mesh_records(body: &BodyModel, rig: &CameraRig, opts: &GenerateOptions, index: u64) -> Result<Option<Vec<PairRecord>>> {
    for attempt in 0..FRUSTUM_ATTEMPTS {
        let seed = mesh_seed(opts.seed, opts.split, index, attempt);
        let sample = body.sample_mesh(seed, &opts.normalize)?;
        let cameras: Vec<usize> = match opts.mode {
            GenerateMode::Enumerate => (0..rig.len()).collect(),
            GenerateMode::Sample => {
                use rand::Rng as _;
                let mut r = rng::rng(rng::derive(seed, &[rng::stream::CAMERA_CHOICE]));
                vec![r.random_range(0..rig.len())]
            }
        };
        let records: Vec<PairRecord> = cameras
            .iter()
            .map(|&c| make_record(&sample, &body.template.coarse_indices, rig, c, index, opts.store_full))
            .collect();
        if records
            .iter()
            .all(|r| view_ok(&r.visibility, &r.joints2d, &rig.cameras[r.camera_id as usize]))
        {
            return Ok(Some(records));
        }
    }
    Ok(None)
}

/// Records for mesh indices `range`, in index order, plus the number of
/// meshes skipped. Runs on the current rayon pool; the output does not depend
/// on its size.
pub fn generate_records(
    body: &BodyModel,
    rig: &CameraRig,
    opts: &GenerateOptions,
    range: std::ops::Range<u64>,
) -> Result<(Vec<PairRecord>, usize)> {
    let per_mesh: Vec<Option<Vec<PairRecord>>> = range
        .into_par_iter()
        .map(|i| mesh_records(body, rig, opts, i))
        .collect::<Result<_>>()?;
    let skipped = per_mesh.iter().filter(|m| m.is_none()).count();
    Ok((per_mesh.into_iter().flatten().flatten().collect(), skipped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateSummary {
    pub records: u64,
    pub skipped_meshes: usize,
    pub shards: Vec<PathBuf>,
}

/// Rolling shard writer: a new file every `per_shard` pair records.
pub struct ShardWriter {
    dir: PathBuf,
    header: Header,
    rig_payload: Vec<u8>,
    per_shard: usize,
    current: Option<ContainerWriter>,
    in_current: usize,
    shards: Vec<PathBuf>,
    records: u64,
}

pub fn shard_name(index: usize) -> String {
    format!("shard-{index:05}.mpt")
}

impl ShardWriter {
    /// Fails if `dir` already holds shards so stale files never mix with
    /// new ones.
    pub fn create(dir: impl AsRef<Path>, dims: Dims, rig: &CameraRig, seed: u64, per_shard: usize) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if per_shard == 0 {
            return Err(Error::config("records per shard must be positive"));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if !shard_paths(&dir)?.is_empty() {
            return Err(Error::config(format!("{} already contains shards", dir.display())));
        }
        let rig_payload = encode_rig(rig);
        let header = Header {
            kind: FileKind::Shard,
            joints: dims.joints as u32,
            coarse_vertices: dims.coarse_vertices as u32,
            full_vertices: dims.full_vertices as u32,
            record_count: 0,
            global_seed: seed,
            rig_crc: crc32fast::hash(&rig_payload),
        };
        Ok(Self {
            dir,
            header,
            rig_payload,
            per_shard,
            current: None,
            in_current: 0,
            shards: Vec::new(),
            records: 0,
        })
    }

    pub fn push(&mut self, record: &PairRecord) -> Result<()> {
        if self.in_current == self.per_shard {
            if let Some(w) = self.current.take() {
                w.finish()?;
            }
            self.in_current = 0;
        }
        if self.current.is_none() {
            let path = self.dir.join(shard_name(self.shards.len()));
            let mut w = ContainerWriter::create(&path, self.header)?;
            w.push(&Record::new(tag::RIG, self.rig_payload.clone()))?;
            self.shards.push(path);
            self.current = Some(w);
        }
        self.current.as_mut().expect("open shard").push(&Record::new(tag::PAIR, record.encode()))?;
        self.in_current += 1;
        self.records += 1;
        Ok(())
    }

    /// Close the last shard. An empty run still writes one shard holding
    /// only the rig.
    pub fn finish(mut self) -> Result<(u64, Vec<PathBuf>)> {
        if self.current.is_none() && self.shards.is_empty() {
            let path = self.dir.join(shard_name(0));
            let mut w = ContainerWriter::create(&path, self.header)?;
            w.push(&Record::new(tag::RIG, self.rig_payload.clone()))?;
            self.shards.push(path);
            self.current = Some(w);
        }
        if let Some(w) = self.current.take() {
            w.finish()?;
        }
        Ok((self.records, self.shards))
    }
}

/// Generate `opts.meshes` meshes and write them as shards under `out_dir`.
pub fn generate(body: &BodyModel, opts: &GenerateOptions, out_dir: impl AsRef<Path>) -> Result<GenerateSummary> {
    if opts.meshes == 0 {
        return Err(Error::config("need at least one mesh"));
    }
    let rig = rig_for_views(opts.views)?;
    let mut writer = ShardWriter::create(out_dir, Dims::of_body(body), &rig, opts.seed, opts.records_per_shard)?;
    let mut skipped = 0;
    let n = opts.meshes as u64;
    let mut start = 0;
    while start < n {
        let end = (start + GENERATE_CHUNK as u64).min(n);
        let (records, s) = generate_records(body, &rig, opts, start..end)?;
        skipped += s;
        for r in &records {
            writer.push(r)?;
        }
        start = end;
    }
    if skipped > 0 {
        log::warn!("{skipped} of {} meshes skipped: out of frame after {FRUSTUM_ATTEMPTS} poses", opts.meshes);
    }
    let (records, shards) = writer.finish()?;
    Ok(GenerateSummary {
        records,
        skipped_meshes: skipped,
        shards,
    })
}

/// Shard files in `path`: the file itself, or the sorted `*.mpt` files of a
/// directory.
pub fn shard_paths(path: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let path = path.as_ref();
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.extension().is_some_and(|e| e == "mpt") && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Indexed access to pair records.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn get(&self, index: usize) -> Result<PairRecord>;
    fn rig(&self) -> &CameraRig;
    fn dims(&self) -> Dims;
}

/// Records held in memory.
#[derive(Debug, Clone)]
pub struct MemoryPairs {
    pub records: Vec<PairRecord>,
    pub rig: CameraRig,
    pub dims: Dims,
}

impl PairSource for MemoryPairs {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn get(&self, index: usize) -> Result<PairRecord> {
        self.records
            .get(index)
            .cloned()
            .ok_or_else(|| Error::config(format!("record {index} out of range ({})", self.records.len())))
    }

    fn rig(&self) -> &CameraRig {
        &self.rig
    }

    fn dims(&self) -> Dims {
        self.dims
    }
}

struct ShardFile {
    path: PathBuf,
    file: Mutex<File>,
}

/// A set of shards opened for random access. Headers must agree on kind,
/// dimensions and rig; payloads are read and checksummed on access.
pub struct ShardSet {
    files: Vec<ShardFile>,
    entries: Vec<(u32, RecordLocation)>,
    rig: CameraRig,
    dims: Dims,
    seeds: Vec<u64>,
}

impl ShardSet {
    pub fn open(paths: &[PathBuf]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::config("no shard files given"));
        }
        let mut files = Vec::new();
        let mut entries = Vec::new();
        let mut first: Option<(Header, CameraRig)> = None;
        let mut seeds = Vec::new();
        for (fi, path) in paths.iter().enumerate() {
            let (header, locations) = container::scan(path)?;
            if header.kind != FileKind::Shard {
                return Err(Error::format(path, format!("expected a dataset shard, found {:?}", header.kind)));
            }
            let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
            let rig_loc = locations
                .first()
                .filter(|l| l.tag == tag::RIG)
                .ok_or_else(|| Error::format(path, "first record is not the camera rig"))?;
            let rig_record = container::read_at(&mut file, rig_loc, path)?;
            if crc32fast::hash(&rig_record.payload) != header.rig_crc {
                return Err(Error::format(path, "rig record does not match the header rig checksum"));
            }
            match &first {
                None => first = Some((header, decode_rig(&rig_record.payload)?)),
                Some((h, _)) => {
                    if Dims::of_header(h) != Dims::of_header(&header) || h.rig_crc != header.rig_crc {
                        return Err(Error::format(
                            path,
                            format!(
                                "header mismatch with {}: dims {:?} vs {:?}, rig crc {:08x} vs {:08x}",
                                paths[0].display(),
                                Dims::of_header(h),
                                Dims::of_header(&header),
                                h.rig_crc,
                                header.rig_crc
                            ),
                        ));
                    }
                }
            }
            if !seeds.contains(&header.global_seed) {
                seeds.push(header.global_seed);
            }
            entries.extend(locations.iter().filter(|l| l.tag == tag::PAIR).map(|l| (fi as u32, *l)));
            files.push(ShardFile {
                path: path.clone(),
                file: Mutex::new(file),
            });
        }
        let (header, rig) = first.expect("at least one shard");
        Ok(Self {
            files,
            entries,
            rig,
            dims: Dims::of_header(&header),
            seeds,
        })
    }

    /// Open every shard under a directory (or a single shard file).
    pub fn open_dir(path: impl AsRef<Path>) -> Result<Self> {
        let paths = shard_paths(&path)?;
        if paths.is_empty() {
            return Err(Error::config(format!("no shards found at {}", path.as_ref().display())));
        }
        Self::open(&paths)
    }

    /// Generation seeds recorded in the shard headers.
    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn paths(&self) -> Vec<&Path> {
        self.files.iter().map(|f| f.path.as_path()).collect()
    }
}

impl PairSource for ShardSet {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> Result<PairRecord> {
        let (fi, loc) = *self
            .entries
            .get(index)
            .ok_or_else(|| Error::config(format!("record {index} out of range ({})", self.entries.len())))?;
        let f = &self.files[fi as usize];
        let record = {
            let mut file = f.file.lock().unwrap_or_else(|e| e.into_inner());
            container::read_at(&mut *file, &loc, &f.path)?
        };
        PairRecord::decode(&record.payload, self.dims).map_err(|e| Error::format(&f.path, format!("record at byte {}: {e}", loc.offset)))
    }

    fn rig(&self) -> &CameraRig {
        &self.rig
    }

    fn dims(&self) -> Dims {
        self.dims
    }
}

/// A view on selected records of another source.
pub struct Subset<'a, S: ?Sized> {
    inner: &'a S,
    indices: Vec<usize>,
}

impl<'a, S: PairSource + ?Sized> Subset<'a, S> {
    pub fn new(inner: &'a S, indices: Vec<usize>) -> Self {
        Self { inner, indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

impl<S: PairSource + ?Sized> PairSource for Subset<'_, S> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn get(&self, index: usize) -> Result<PairRecord> {
        let i = *self
            .indices
            .get(index)
            .ok_or_else(|| Error::config(format!("record {index} out of range ({})", self.indices.len())))?;
        self.inner.get(i)
    }

    fn rig(&self) -> &CameraRig {
        self.inner.rig()
    }

    fn dims(&self) -> Dims {
        self.inner.dims()
    }
}

/// Sorted indices of a seeded uniform sample of `floor(fraction * n)`
/// records without replacement.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("subset fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let count = (fraction * n as f64).floor() as usize;
    let mut r = rng::rng(rng::derive(seed, &[rng::stream::SUBSET]));
    let mut picked = rand::seq::index::sample(&mut r, n, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub fn subset<S: PairSource + ?Sized>(source: &S, fraction: f64, seed: u64) -> Result<Subset<'_, S>> {
    Ok(Subset::new(source, subset_indices(source.len(), fraction, seed)?))
}

/// Seeded permutation of `0..n`.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::derive(seed, &[rng::stream::SHUFFLE])));
    order
}

/// Batches of records in stored order or a seeded permutation. Records that
/// fail their checksum are skipped with a warning and counted.
pub struct BatchIter<'a, S: ?Sized> {
    source: &'a S,
    order: Vec<usize>,
    batch_size: usize,
    position: usize,
    skipped: usize,
}

impl<S: PairSource + ?Sized> BatchIter<'_, S> {
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

pub fn read_iter<S: PairSource + ?Sized>(source: &S, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter<'_, S>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let order = match shuffle_seed {
        Some(seed) => shuffled_order(source.len(), seed),
        None => (0..source.len()).collect(),
    };
    Ok(BatchIter {
        source,
        order,
        batch_size,
        position: 0,
        skipped: 0,
    })
}

impl<S: PairSource + ?Sized> Iterator for BatchIter<'_, S> {
    type Item = Result<Vec<PairRecord>>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size && self.position < self.order.len() {
            let i = self.order[self.position];
            self.position += 1;
            match self.source.get(i) {
                Ok(r) => batch.push(r),
                Err(e @ Error::Format { .. }) => {
                    log::warn!("skipping record {i}: {e}");
                    self.skipped += 1;
                }
                Err(e) => return Some(Err(e)),
            }
        }
        (!batch.is_empty()).then_some(Ok(batch))
    }
}

/// One frame of an external mesh sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshFrame {
    pub joints3d: Vec<[f32; 3]>,
    pub vertices: Vec<[f32; 3]>,
}

/// Plain interchange format for mesh sequences:
///
/// ```text
/// joints u32, vertices u32, frames u32
/// per frame: joints*3 f32, then vertices*3 f32
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct MeshSequence {
    pub joints: usize,
    pub vertices: usize,
    pub frames: Vec<MeshFrame>,
}

const MESH_SEQ_HEADER: usize = 12;

impl MeshSequence {
    pub fn from_samples(samples: &[MeshSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::config("empty mesh sequence"))?;
        let (joints, vertices) = (first.joints3d.len(), first.vertices3d.len());
        let frames = samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if s.joints3d.len() != joints || s.vertices3d.len() != vertices {
                    return Err(Error::dim("mesh sequence frame", format!("{joints} joints, {vertices} vertices"), format!("frame {i}: {}, {}", s.joints3d.len(), s.vertices3d.len())));
                }
                Ok(MeshFrame {
                    joints3d: points_f32(&s.joints3d),
                    vertices: points_f32(&s.vertices3d),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { joints, vertices, frames })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut e = Encoder::new();
        e.u32(self.joints as u32).u32(self.vertices as u32).u32(self.frames.len() as u32);
        for f in &self.frames {
            for p in f.joints3d.iter().chain(&f.vertices) {
                e.f32s(p);
            }
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&e.finish()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < MESH_SEQ_HEADER {
            return Err(Error::format(path, format!("header needs {MESH_SEQ_HEADER} bytes, file has {}", bytes.len())));
        }
        let mut d = Decoder::new(&bytes);
        let joints = d.u32()? as usize;
        let vertices = d.u32()? as usize;
        let frames = d.u32()? as usize;
        let frame_bytes = (joints + vertices) * 12;
        let expected = MESH_SEQ_HEADER as u64 + frames as u64 * frame_bytes as u64;
        if expected != bytes.len() as u64 {
            return Err(Error::format(
                path,
                format!(
                    "header at bytes 0..12 declares {joints} joints, {vertices} vertices, {frames} frames = {expected} bytes; payload ends at byte {}",
                    bytes.len()
                ),
            ));
        }
        let triples = |v: Vec<f32>| v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let mut out = Vec::with_capacity(frames);
        for _ in 0..frames {
            out.push(MeshFrame {
                joints3d: triples(d.f32s(joints * 3)?),
                vertices: triples(d.f32s(vertices * 3)?),
            });
        }
        Ok(Self { joints, vertices, frames: out })
    }
}

/// A smooth synthetic motion sequence of the body, for exercising import.
pub fn synthetic_sequence(body: &BodyModel, seed: u64, frames: usize, key_every: usize) -> Result<Vec<MeshSample>> {
    crate::body::sample_pose_sequence(&body.tree, seed, &body.limits, frames, key_every)
        .iter()
        .enumerate()
        .map(|(i, pose)| body.pose_mesh(pose, i as u64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportOptions {
    /// Keep frames `0, stride, 2 * stride, ...`.
    pub stride: usize,
    pub views: usize,
    pub seed: u64,
    pub store_full: bool,
    pub normalize: NormalizeOptions,
}

/// Records for the sampled frames of a sequence: each frame is normalized and
/// seen by one uniformly chosen camera. Frames out of frame are skipped.
pub fn import_records(seq: &MeshSequence, coarse_indices: &[usize], rig: &CameraRig, opts: &ImportOptions) -> Result<(Vec<PairRecord>, usize)> {
    if opts.stride == 0 {
        return Err(Error::config("import stride must be positive"));
    }
    if let Some(&bad) = coarse_indices.iter().find(|&&i| i >= seq.vertices) {
        return Err(Error::config(format!("coarse vertex index {bad} outside a {}-vertex mesh", seq.vertices)));
    }
    let mut records = Vec::new();
    let mut skipped = 0;
    for (i, frame) in seq.frames.iter().enumerate().step_by(opts.stride) {
        let raw = MeshSample {
            joints3d: to_vec3(&frame.joints3d),
            vertices3d: to_vec3(&frame.vertices),
            pose: Pose::identity(0),
            source_id: i as u64,
        };
        let sample = normalize_mesh(&raw, &opts.normalize);
        let camera = {
            use rand::Rng as _;
            let mut r = rng::rng(rng::derive(opts.seed, &[rng::stream::CAMERA_CHOICE, i as u64]));
            r.random_range(0..rig.len())
        };
        let record = make_record(&sample, coarse_indices, rig, camera, i as u64, opts.store_full);
        if view_ok(&record.visibility, &record.joints2d, &rig.cameras[camera]) {
            records.push(record);
        } else {
            skipped += 1;
        }
    }
    Ok((records, skipped))
}

/// Import a mesh-seq file into shards under `out_dir`.
pub fn import_meshes(
    path: impl AsRef<Path>,
    coarse_indices: &[usize],
    opts: &ImportOptions,
    out_dir: impl AsRef<Path>,
) -> Result<GenerateSummary> {
    let seq = MeshSequence::read(path)?;
    let rig = rig_for_views(opts.views)?;
    let (records, skipped) = import_records(&seq, coarse_indices, &rig, opts)?;
    let dims = Dims {
        joints: seq.joints,
        coarse_vertices: coarse_indices.len(),
        full_vertices: seq.vertices,
    };
    let mut w = ShardWriter::create(out_dir, dims, &rig, opts.seed, RECORDS_PER_SHARD)?;
    for r in &records {
        w.push(r)?;
    }
    let (count, shards) = w.finish()?;
    Ok(GenerateSummary {
        records: count,
        skipped_meshes: skipped,
        shards,
    })
}

/// Model-ready sample: tokens plus targets in the camera-rotated frame
/// (camera rotation applied, no translation), flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub tokens: TokenGrid,
    pub joints3d: Vec<f64>,
    pub coarse: Vec<f64>,
    pub full: Option<Vec<f64>>,
    pub joints2d: Vec<f64>,
    pub visibility: Vec<bool>,
}

fn rotate_flat(rotation: &Matrix3<f64>, points: &[[f32; 3]]) -> Vec<f64> {
    to_vec3(points).iter().flat_map(|p| {
        let q = rotation * p;
        [q.x, q.y, q.z]
    }).collect()
}

/// Synthesize heatmaps for `record` and tokenize them. With `augmentation`
/// set, jitter, masking and noise are drawn from `seed`; otherwise the
/// heatmaps are clean.
pub fn prepare_sample(
    record: &PairRecord,
    rig: &CameraRig,
    sigma: f64,
    patch: usize,
    augmentation: Option<(&Augmentation, u64)>,
) -> Result<TrainingSample> {
    let camera = rig
        .cameras
        .get(record.camera_id as usize)
        .ok_or_else(|| Error::config(format!("record camera {} not in a {}-camera rig", record.camera_id, rig.len())))?;
    let (w, h) = camera.image_size;
    let joints2d = record.joints2d_vec();
    let stack = match augmentation {
        Some((aug, seed)) => augment(&joints2d, &record.visibility, seed, aug, sigma, w, h)?,
        None => synthesize(&joints2d, &record.visibility, sigma, w, h)?,
    };
    Ok(TrainingSample {
        tokens: tokenize(&stack, patch)?,
        joints3d: rotate_flat(&camera.rotation, &record.joints3d),
        coarse: rotate_flat(&camera.rotation, &record.coarse_vertices),
        full: record.full_vertices.as_ref().map(|f| rotate_flat(&camera.rotation, f)),
        joints2d: joints2d
            .iter()
            .zip(&record.visibility)
            .flat_map(|(p, &v)| if v { [p.x, p.y] } else { [0.0, 0.0] })
            .collect(),
        visibility: record.visibility.clone(),
    })
}
