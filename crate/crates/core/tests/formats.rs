//! Byte-level readers for the shard, checkpoint and mesh-seq layouts,
//! written against the documented formats rather than the library decoders.

use std::path::Path;

use mpt::body::BodyModel;
use mpt::config::RunConfig;
use mpt::container::ContainerReader;
use mpt::dataset::{generate, synthetic_sequence, GenerateOptions, MeshSequence, PairSource, ShardSet};
use mpt::trainer::{pretrain, PretrainOptions};

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn new(b: &'a [u8]) -> Self {
        Self { b, at: 0 }
    }
    fn bytes(&mut self, n: usize) -> &'a [u8] {
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        s
    }
    fn u8(&mut self) -> u8 {
        self.bytes(1)[0]
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.bytes(4).try_into().unwrap())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.bytes(4).try_into().unwrap())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.bytes(8).try_into().unwrap())
    }
    fn done(&self) -> bool {
        self.at == self.b.len()
    }
}

#[derive(Debug)]
struct RawHeader {
    kind: u32,
    joints: u32,
    coarse: u32,
    full: u32,
    records: u64,
    seed: u64,
    rig_crc: u32,
}

/// Header fields plus `(tag, payload)` for every record, checking every CRC.
fn parse_file(path: &Path) -> (RawHeader, Vec<([u8; 4], Vec<u8>)>) {
    let bytes = std::fs::read(path).unwrap();
    let mut c = Cursor::new(&bytes);
    assert_eq!(c.bytes(4), b"MPTD");
    assert_eq!(c.u32(), 1, "version");
    let header = RawHeader {
        kind: c.u32(),
        joints: c.u32(),
        coarse: c.u32(),
        full: c.u32(),
        records: c.u64(),
        seed: c.u64(),
        rig_crc: c.u32(),
    };
    let header_crc = c.u32();
    assert_eq!(header_crc, crc32fast::hash(&bytes[..44]));
    assert_eq!(c.at, 48);
    let mut records = Vec::new();
    while !c.done() {
        let start = c.at;
        let tag: [u8; 4] = c.bytes(4).try_into().unwrap();
        let len = c.u32() as usize;
        let payload = c.bytes(len).to_vec();
        let crc = c.u32();
        assert_eq!(crc, crc32fast::hash(&bytes[start..start + 8 + len]), "record crc");
        records.push((tag, payload));
    }
    (header, records)
}

#[test]
fn shard_bytes_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let body = BodyModel::standard();
    let opts = GenerateOptions {
        store_full: true,
        ..GenerateOptions::new(3, 2, 21)
    };
    let summary = generate(&body, &opts, dir.path()).unwrap();
    assert_eq!(summary.shards.len(), 1);
    let (h, records) = parse_file(&summary.shards[0]);
    assert_eq!((h.kind, h.joints, h.coarse, h.full), (1, 17, 431, 1723));
    assert_eq!(h.seed, 21);
    assert_eq!(h.records as usize, records.len());
    assert_eq!(summary.records as usize, records.len() - 1);

    let (tag, rig) = &records[0];
    assert_eq!(tag, b"RIG_");
    assert_eq!(crc32fast::hash(rig), h.rig_crc);
    let mut c = Cursor::new(rig);
    assert_eq!(c.u32(), 2);
    let _rig_seed = c.u64();
    let set = ShardSet::open_dir(dir.path()).unwrap();
    for cam in &set.rig().cameras {
        for r in 0..3 {
            for k in 0..3 {
                assert_eq!(c.f64(), cam.rotation[(r, k)]);
            }
        }
        for k in 0..3 {
            assert_eq!(c.f64(), cam.translation[k]);
        }
        assert_eq!([c.f64(), c.f64()], cam.focal);
        assert_eq!([c.f64(), c.f64()], cam.principal_point);
        assert_eq!((c.u32() as usize, c.u32() as usize), cam.image_size);
    }
    assert!(c.done());

    for (i, (tag, payload)) in records[1..].iter().enumerate() {
        assert_eq!(tag, b"PAIR");
        let want = set.get(i).unwrap();
        let mut c = Cursor::new(payload);
        assert_eq!(c.u64(), want.mesh_index);
        assert_eq!(c.u64(), want.pose_seed);
        assert_eq!(c.u32(), want.camera_id);
        assert_eq!(c.u32(), 1, "full-vertex flag");
        for p in &want.joints2d {
            assert_eq!([c.f32().to_bits(), c.f32().to_bits()], [p[0].to_bits(), p[1].to_bits()]);
        }
        for &v in &want.visibility {
            assert_eq!(c.u8(), v as u8);
        }
        let full = want.full_vertices.as_ref().unwrap();
        for p in want.joints3d.iter().chain(&want.coarse_vertices).chain(full) {
            assert_eq!([c.f32(), c.f32(), c.f32()], *p);
        }
        assert!(c.done());
    }
}

#[test]
fn checkpoint_bytes_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let body = BodyModel::standard();
    generate(&body, &GenerateOptions::new(2, 1, 4), dir.path().join("d")).unwrap();
    let config = RunConfig::from_text(
        "block_hidden_sizes = 8\nlayers_per_block = 1\nheads_per_block = 2\nmlp_ratio = 2\n\
         upsampler_hidden = 4\ndesk_scale = off\nbatch_size = 2\nmax_steps = 2\nseed = 9\n",
    )
    .unwrap();
    let ckpt = dir.path().join("c.ckpt");
    let outcome = pretrain(
        &config,
        &body,
        &ShardSet::open_dir(dir.path().join("d")).unwrap(),
        &PretrainOptions {
            checkpoint: Some(ckpt.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let saved = outcome.checkpoint;

    let (h, records) = parse_file(&ckpt);
    assert_eq!((h.kind, h.joints, h.coarse, h.full, h.seed, h.rig_crc), (2, 17, 431, 1723, 9, 0));
    let n = saved.params.len();
    assert_eq!(records.len(), 2 + 3 * n);
    assert_eq!(h.records as usize, records.len());
    assert_eq!(&records[0].0, b"CONF");
    assert_eq!(String::from_utf8(records[0].1.clone()).unwrap(), config.to_text());
    assert_eq!(&records[1].0, b"STEP");
    let mut c = Cursor::new(&records[1].1);
    assert_eq!(
        [c.u64(), c.u64(), c.u64(), c.u64()],
        [saved.step, saved.total_steps, saved.optimizer.step, saved.rejected_steps]
    );

    let names: Vec<&str> = saved.params.iter().map(|(name, _)| name).collect();
    let groups = [
        ("", saved.params.tensors()),
        ("adam_m/", &saved.optimizer.first_moment[..]),
        ("adam_v/", &saved.optimizer.second_moment[..]),
    ];
    let mut it = records[2..].iter();
    for (prefix, tensors) in groups {
        for (name, t) in names.iter().zip(tensors) {
            let (tag, payload) = it.next().unwrap();
            assert_eq!(tag, b"TENS");
            let mut c = Cursor::new(payload);
            let len = c.u32() as usize;
            assert_eq!(std::str::from_utf8(c.bytes(len)).unwrap(), format!("{prefix}{name}"));
            assert_eq!(c.u8(), 1, "dtype f32");
            let rank = c.u32() as usize;
            let shape: Vec<usize> = (0..rank).map(|_| c.u32() as usize).collect();
            assert_eq!(shape, t.shape());
            for v in t.data() {
                assert_eq!(c.f32().to_bits(), v.to_bits());
            }
            assert!(c.done());
        }
    }
}

#[test]
fn mesh_seq_bytes_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let body = BodyModel::standard();
    let seq = MeshSequence::from_samples(&synthetic_sequence(&body, 2, 3, 2).unwrap()).unwrap();
    let path = dir.path().join("s.mseq");
    seq.write(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let mut c = Cursor::new(&bytes);
    let (k, m, f) = (c.u32() as usize, c.u32() as usize, c.u32() as usize);
    assert_eq!((k, m, f), (17, 1723, 3));
    assert_eq!(bytes.len(), 12 + f * (k + m) * 12);
    for frame in &seq.frames {
        for p in frame.joints3d.iter().chain(&frame.vertices) {
            assert_eq!([c.f32(), c.f32(), c.f32()], *p);
        }
    }
    assert!(c.done());
}

#[test]
fn corrupt_and_truncated_records_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let summary = generate(&BodyModel::standard(), &GenerateOptions::new(3, 1, 5), dir.path()).unwrap();
    let path = &summary.shards[0];
    let (_, records) = parse_file(path);
    let mut bytes = std::fs::read(path).unwrap();
    let second_pair = 48 + records[..2].iter().map(|r| 12 + r.1.len()).sum::<usize>();
    bytes[second_pair + 8 + 20] ^= 0x40;
    std::fs::write(path, &bytes).unwrap();

    let results: Vec<bool> = ContainerReader::open(path).unwrap().map(|(_, r)| r.is_ok()).collect();
    assert_eq!(results, vec![true, true, false, true]);

    bytes.truncate(bytes.len() - 5);
    std::fs::write(path, &bytes).unwrap();
    let results: Vec<bool> = ContainerReader::open(path).unwrap().map(|(_, r)| r.is_ok()).collect();
    assert_eq!(results, vec![true, true, false, false]);
}
