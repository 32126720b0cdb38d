//! Checkpoint files: a container of kind [`FileKind::Checkpoint`] holding
//!
//! - `CONF`: the run configuration as `key = value` text,
//! - `STEP`: `step u64, total_steps u64, optimizer_step u64, rejected_steps u64`,
//! - one `TENS` record per parameter, then `adam_m/<name>` and
//!   `adam_v/<name>` for the moment buffers, in layout order.
//!
//! A `TENS` payload is `name (u32 length + UTF-8), dtype u8 (1 = f32),
//! rank u32, dims u32 * rank, values`.

use std::path::{Path, PathBuf};

use super::optim::AdamState;
use crate::config::RunConfig;
use crate::container::{tag, ContainerReader, Decoder, Encoder, FileKind, Header, Record};
use crate::model::Params;
use crate::tensor::Tensor;
use crate::{Error, Result};

const DTYPE_F32: u8 = 1;
pub const FIRST_MOMENT_PREFIX: &str = "adam_m/";
pub const SECOND_MOMENT_PREFIX: &str = "adam_v/";

pub fn encode_tensor(name: &str, t: &Tensor<f32>) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str(name).u8(DTYPE_F32).u32(t.shape().len() as u32);
    for &d in t.shape() {
        e.u32(d as u32);
    }
    e.f32s(t.data());
    e.finish()
}

pub fn decode_tensor(payload: &[u8]) -> Result<(String, Tensor<f32>)> {
    let mut d = Decoder::new(payload);
    let name = d.str()?;
    let dtype = d.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::format("<tensor>", format!("tensor {name}: unsupported dtype {dtype}")));
    }
    let rank = d.u32()? as usize;
    let shape = (0..rank).map(|_| d.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let len = shape.iter().product();
    let data = d.f32s(len)?;
    d.finish()?;
    Ok((name, Tensor::new(shape, data)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Params<f32>,
    pub optimizer: AdamState<f32>,
    /// Training steps completed.
    pub step: u64,
    pub total_steps: u64,
    pub rejected_steps: u64,
}

impl Checkpoint {
    fn records(&self) -> Vec<Record> {
        let mut out = vec![Record::new(tag::CONFIG, self.config.to_text().into_bytes())];
        let mut e = Encoder::new();
        e.u64(self.step).u64(self.total_steps).u64(self.optimizer.step).u64(self.rejected_steps);
        out.push(Record::new(tag::STEP, e.finish()));
        for (name, t) in self.params.iter() {
            out.push(Record::new(tag::TENSOR, encode_tensor(name, t)));
        }
        for (prefix, moments) in [(FIRST_MOMENT_PREFIX, &self.optimizer.first_moment), (SECOND_MOMENT_PREFIX, &self.optimizer.second_moment)] {
            for (name, t) in self.params.names().iter().zip(moments) {
                out.push(Record::new(tag::TENSOR, encode_tensor(&format!("{prefix}{name}"), t)));
            }
        }
        out
    }

    /// Write to a temporary sibling and rename over `path`, so an existing
    /// checkpoint survives a failed write.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let m = &self.config.model;
        let header = Header {
            kind: FileKind::Checkpoint,
            joints: m.joint_query_count as u32,
            coarse_vertices: m.coarse_vertex_count as u32,
            full_vertices: m.full_vertex_count as u32,
            record_count: 0,
            global_seed: self.config.train.seed,
            rig_crc: 0,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tmp = PathBuf::from(path);
        tmp.as_mut_os_string().push(".tmp");
        crate::container::write_container(&tmp, header, &self.records())?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = ContainerReader::open(path)?;
        let header = *reader.header();
        if header.kind != FileKind::Checkpoint {
            return Err(Error::format(path, format!("expected a checkpoint, found {:?}", header.kind)));
        }
        let mut config = None;
        let mut progress = None;
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (i, r) in reader {
            let r = r?;
            match r.tag {
                tag::CONFIG => {
                    let text = String::from_utf8(r.payload).map_err(|_| Error::format(path, format!("record {i}: configuration is not UTF-8")))?;
                    config = Some(RunConfig::from_text(&text)?);
                }
                tag::STEP => {
                    let mut d = Decoder::new(&r.payload);
                    progress = Some((d.u64()?, d.u64()?, d.u64()?, d.u64()?));
                    d.finish()?;
                }
                tag::TENSOR => {
                    let (name, t) = decode_tensor(&r.payload).map_err(|e| Error::format(path, format!("record {i}: {e}")))?;
                    if let Some(n) = name.strip_prefix(FIRST_MOMENT_PREFIX) {
                        first.push((n.to_string(), t));
                    } else if let Some(n) = name.strip_prefix(SECOND_MOMENT_PREFIX) {
                        second.push((n.to_string(), t));
                    } else {
                        params.push((name, t));
                    }
                }
                other => log::warn!("{}: ignoring record {i} with tag {:?}", path.display(), String::from_utf8_lossy(&other)),
            }
        }
        let config: RunConfig = config.ok_or_else(|| Error::format(path, "missing configuration record"))?;
        let (step, total_steps, optimizer_step, rejected_steps) = progress.ok_or_else(|| Error::format(path, "missing step record"))?;
        let params = Params::from_named(params)?;
        params.check_layout(&config.model)?;
        let (m, mc, mf) = (config.model.joint_query_count, config.model.coarse_vertex_count, config.model.full_vertex_count);
        if (header.joints as usize, header.coarse_vertices as usize, header.full_vertices as usize) != (m, mc, mf) {
            return Err(Error::format(path, "header dimensions disagree with the stored configuration"));
        }
        let order = |moments: Vec<(String, Tensor<f32>)>, what: &str| -> Result<Vec<Tensor<f32>>> {
            if moments.len() != params.len() || moments.iter().zip(params.names()).any(|((a, _), b)| a != b) {
                return Err(Error::format(path, format!("{what} buffers do not mirror the parameters")));
            }
            Ok(moments.into_iter().map(|(_, t)| t).collect())
        };
        let optimizer = AdamState {
            first_moment: order(first, "first moment")?,
            second_moment: order(second, "second moment")?,
            step: optimizer_step,
            ..AdamState::new(&params)
        };
        optimizer.check_shapes(&params)?;
        Ok(Self {
            config,
            params,
            optimizer,
            step,
            total_steps,
            rejected_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use proptest::prelude::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model = ModelConfig {
            block_hidden_sizes: vec![8, 4],
            layers_per_block: 1,
            heads_per_block: 2,
            mlp_ratio: 2,
            joint_query_count: 3,
            coarse_vertex_count: 4,
            full_vertex_count: 6,
            image_size: 8,
            patch_size: 4,
            upsampler_hidden: 3,
            desk_scale: false,
            ..ModelConfig::desk()
        };
        c.train.seed = 77;
        c
    }

    fn checkpoint() -> Checkpoint {
        let config = tiny();
        let params = init_params::<f32>(&config.model, 5);
        let mut optimizer = AdamState::new(&params);
        optimizer.step = 3;
        for (i, t) in optimizer.first_moment.iter_mut().enumerate() {
            t.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = (i * 31 + j) as f32 * 1e-3);
        }
        for t in optimizer.second_moment.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = f32::MIN_POSITIVE);
        }
        Checkpoint {
            config,
            params,
            optimizer,
            step: 12,
            total_steps: 40,
            rejected_steps: 1,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/ck.mpt");
        let c = checkpoint();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        let bits = |c: &Checkpoint| c.params.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&c));
        assert!(!dir.path().join("sub/ck.mpt.tmp").exists());
    }

    #[test]
    fn wrong_kind_and_missing_moments_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.mpt");
        let c = checkpoint();
        let mut records = c.records();
        records.pop();
        let header = Header {
            kind: FileKind::Checkpoint,
            joints: 3,
            coarse_vertices: 4,
            full_vertices: 6,
            record_count: 0,
            global_seed: 0,
            rig_crc: 0,
        };
        crate::container::write_container(&p, header, &records).unwrap();
        assert!(Checkpoint::load(&p).unwrap_err().to_string().contains("second moment"));
        crate::container::write_container(&p, Header { kind: FileKind::Shard, ..header }, &records).unwrap();
        assert!(Checkpoint::load(&p).unwrap_err().to_string().contains("expected a checkpoint"));
    }

    proptest! {
        #[test]
        fn tensor_codec_round_trip(dims in proptest::collection::vec(1usize..5, 0..4), seed in any::<u32>()) {
            let len: usize = dims.iter().product();
            let data: Vec<f32> = (0..len).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(dims.clone(), data).unwrap();
            let (name, back) = decode_tensor(&encode_tensor("x.y", &t)).unwrap();
            prop_assert_eq!(name, "x.y");
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
