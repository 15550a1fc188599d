//! Checkpoint persistence.
//!
//! One file per stage: an ASCII header (format version, config snapshot,
//! iteration, rng state, block index with names/shapes/offsets) followed by
//! the raw parameter blocks as little-endian 64-bit floats. Blocks are
//! written in sorted name order and offsets are in f64 elements relative to
//! the start of the data section, so save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::cm::{ConsistencyModel, OmegaEmbedding};
use crate::codec::Codec;
use crate::config::RunConfig;
use crate::lrm::LatentRM;
use crate::reward::{ExpertRM, ExpertVariant};
use crate::teacher::TeacherModel;
use crate::{Error, Result, Tensor};

const MAGIC: &str = "RGCD-CKPT";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub rng_state: u64,
    /// Parameter blocks with component prefixes, e.g. `teacher.in_w`,
    /// `cm.out_b`, `cm_ema.out_b`, `codec.enc.w0`, `lrm.cond_emb`,
    /// `reward.basis`, `cm.omega_freqs`.
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(config: RunConfig, iteration: u64, rng_state: u64) -> Self {
        Checkpoint {
            config,
            iteration,
            rng_state,
            params: ParamSet::new(),
        }
    }

    pub fn insert_block(&mut self, prefix: &str, params: &ParamSet) {
        self.params.extend_prefixed(prefix, params);
    }

    pub fn block(&self, prefix: &str) -> ParamSet {
        self.params.strip_prefix(prefix)
    }

    pub fn has_block(&self, prefix: &str) -> bool {
        self.params.names().any(|n| n.starts_with(prefix))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config_text = self.config.to_canonical_string();
        let config_lines = config_text.lines().count();

        let mut header = String::new();
        header.push_str(&format!("{MAGIC} {VERSION}\n"));
        header.push_str(&format!("iteration {}\n", self.iteration));
        header.push_str(&format!("rng-state {}\n", self.rng_state));
        header.push_str(&format!("config-lines {config_lines}\n"));
        header.push_str(&config_text);
        header.push_str(&format!("blocks {}\n", self.params.len()));
        let mut offset = 0usize;
        for (name, tensor) in self.params.iter() {
            let shape = tensor
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            header.push_str(&format!("block {name} {shape} {offset} {}\n", tensor.numel()));
            offset += tensor.numel();
        }
        header.push_str("end-header\n");

        let mut bytes = header.into_bytes();
        bytes.reserve(offset * 8);
        for (_, tensor) in self.params.iter() {
            for v in tensor.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let header_end = find_header_end(bytes)?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::CheckpointFormat("header is not valid UTF-8".into()))?;
        let data = &bytes[header_end..];

        let mut lines = header.lines();
        let magic_line = lines
            .next()
            .ok_or_else(|| Error::CheckpointFormat("empty file".into()))?;
        let mut parts = magic_line.split_whitespace();
        let magic = parts.next().unwrap_or("");
        let version = parts.next().unwrap_or("");
        if magic != MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "bad magic `{magic_line}`"
            )));
        }
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version.into(),
                expected: VERSION.into(),
            });
        }

        let iteration = parse_field(lines.next(), "iteration")?;
        let rng_state = parse_field(lines.next(), "rng-state")?;
        let config_lines: usize = parse_field(lines.next(), "config-lines")?;
        let mut config_text = String::new();
        for _ in 0..config_lines {
            let line = lines
                .next()
                .ok_or_else(|| Error::CheckpointFormat("config snapshot truncated".into()))?;
            config_text.push_str(line);
            config_text.push('\n');
        }
        let config = RunConfig::parse(&config_text)?;

        let block_count: usize = parse_field(lines.next(), "blocks")?;
        let mut params = ParamSet::new();
        for _ in 0..block_count {
            let line = lines
                .next()
                .ok_or_else(|| Error::CheckpointFormat("block index truncated".into()))?;
            let mut it = line.split_whitespace();
            if it.next() != Some("block") {
                return Err(Error::CheckpointFormat(format!("bad block line `{line}`")));
            }
            let name = it
                .next()
                .ok_or_else(|| Error::CheckpointFormat("block name missing".into()))?;
            let shape_str = it
                .next()
                .ok_or_else(|| Error::CheckpointFormat("block shape missing".into()))?;
            let offset: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::CheckpointFormat("block offset missing".into()))?;
            let len: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::CheckpointFormat("block length missing".into()))?;
            let shape: Vec<usize> = shape_str
                .split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| Error::CheckpointFormat(format!("bad shape `{shape_str}`")))
                })
                .collect::<Result<_>>()?;
            let byte_start = offset * 8;
            let byte_end = byte_start + len * 8;
            if byte_end > data.len() {
                return Err(Error::CheckpointFormat(format!(
                    "block `{name}` extends past end of file (truncated?)"
                )));
            }
            let values: Vec<f64> = data[byte_start..byte_end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.insert(name, Tensor::new(shape, values)?);
        }
        if lines.next() != Some("end-header") {
            return Err(Error::CheckpointFormat("missing end-header".into()));
        }

        Ok(Checkpoint {
            config,
            iteration,
            rng_state,
            params,
        })
    }

    // Component reconstruction from blocks + config dims.

    pub fn teacher(&self) -> Result<TeacherModel> {
        let params = self.expect_block("teacher.")?;
        let cfg = &self.config;
        Ok(TeacherModel {
            params,
            d_z: cfg.d_z,
            n_classes: cfg.n_classes,
            hidden: cfg.teacher_hidden,
            n_steps: cfg.sched_n,
        })
    }

    pub fn codec(&self) -> Result<Codec> {
        let params = self.expect_block("codec.")?;
        let cfg = &self.config;
        Ok(Codec {
            params,
            d_x: cfg.d_x,
            d_z: cfg.d_z,
            hidden: cfg.codec_hidden,
        })
    }

    pub fn consistency_model(&self) -> Result<ConsistencyModel> {
        let params = self.expect_block("cm.")?;
        let freqs = params
            .get("omega_freqs")
            .ok_or_else(|| Error::CheckpointFormat("cm.omega_freqs block missing".into()))?
            .values()
            .to_vec();
        let mut params = params;
        // the frequency bank is metadata, not a parameter
        let mut cleaned = ParamSet::new();
        for (name, value) in params.iter() {
            if name != "omega_freqs" {
                cleaned.insert(name.clone(), value.clone());
            }
        }
        std::mem::swap(&mut params, &mut cleaned);
        let cfg = &self.config;
        Ok(ConsistencyModel {
            params,
            omega_emb: OmegaEmbedding::from_freqs(freqs),
            sigma_data: cfg.sigma_data,
            d_z: cfg.d_z,
            n_classes: cfg.n_classes,
            hidden: cfg.teacher_hidden,
            n_steps: cfg.sched_n,
        })
    }

    pub fn ema_params(&self) -> Result<ParamSet> {
        self.expect_block("cm_ema.")
    }

    pub fn latent_rm(&self) -> Result<LatentRM> {
        let params = self.expect_block("lrm.")?;
        let cfg = &self.config;
        Ok(LatentRM {
            params,
            d_z: cfg.d_z,
            n_classes: cfg.n_classes,
            hidden: cfg.lrm_hidden,
            embed_dim: cfg.lrm_embed_dim,
            tau_l: cfg.tau_l,
            reward_scale: cfg.lrm_reward_scale,
        })
    }

    /// Expert RM reconstructed from the config; for the projection variant
    /// the basis comes from the persisted block when present, otherwise it
    /// is re-derived from the run seed.
    pub fn expert_rm(&self) -> ExpertRM {
        let cfg = &self.config;
        let scale = cfg.resolved_reward_scale();
        match cfg.reward_variant {
            ExpertVariant::Aligned => ExpertRM::aligned(cfg.preset, cfg.d_x, cfg.n_classes, scale, cfg.target_stretch),
            ExpertVariant::PreferenceOnly => {
                ExpertRM::preference_only(cfg.preset, cfg.d_x, cfg.n_classes, scale, cfg.target_stretch)
            }
            ExpertVariant::Projection => {
                let mut rm = ExpertRM::projection(
                    cfg.preset,
                    cfg.d_x,
                    cfg.n_classes,
                    scale,
                    cfg.target_stretch,
                    cfg.d_vis,
                    cfg.seed,
                );
                if let Some(basis) = self.params.get("reward.basis") {
                    rm.basis = Some(basis.clone());
                }
                rm
            }
        }
    }

    fn expect_block(&self, prefix: &str) -> Result<ParamSet> {
        let block = self.block(prefix);
        if block.is_empty() {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint has no `{prefix}` parameter block"
            )));
        }
        Ok(block)
    }
}

fn parse_field<T: std::str::FromStr>(line: Option<&str>, name: &str) -> Result<T> {
    let line = line.ok_or_else(|| Error::CheckpointFormat(format!("missing field {name}")))?;
    let value = line
        .strip_prefix(name)
        .map(str::trim)
        .ok_or_else(|| Error::CheckpointFormat(format!("expected `{name}`, got `{line}`")))?;
    value
        .parse()
        .map_err(|_| Error::CheckpointFormat(format!("bad value for {name}: `{value}`")))
}

fn find_header_end(bytes: &[u8]) -> Result<usize> {
    let marker = b"end-header\n";
    let mut i = 0;
    while i + marker.len() <= bytes.len() {
        if &bytes[i..i + marker.len()] == marker {
            return Ok(i + marker.len());
        }
        // headers are line-oriented: jump to the next newline
        match bytes[i..].iter().position(|&b| b == b'\n') {
            Some(p) => i += p + 1,
            None => break,
        }
    }
    Err(Error::CheckpointFormat(
        "missing end-header marker (truncated file?)".into(),
    ))
}

/// Consistency-model parameter block plus the frequency bank metadata.
pub fn cm_blocks(ckpt: &mut Checkpoint, cm: &ConsistencyModel, ema: &ParamSet) {
    ckpt.insert_block("cm.", &cm.params);
    let mut meta = ParamSet::new();
    meta.insert("omega_freqs", Tensor::vector(cm.omega_emb.freqs.clone()));
    ckpt.insert_block("cm.", &meta);
    ckpt.insert_block("cm_ema.", ema);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = RunConfig::parse("seed=5\ndims.d_z=3\nteacher.hidden=8").unwrap();
        let mut ckpt = Checkpoint::new(cfg.clone(), 42, 0xDEADBEEF);
        let teacher = TeacherModel::init(
            cfg.d_z,
            cfg.n_classes,
            cfg.teacher_hidden,
            cfg.sched_n,
            &mut Rng::new(1),
        );
        ckpt.insert_block("teacher.", &teacher.params);
        ckpt
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.iteration, 42);
        assert_eq!(loaded.rng_state, 0xDEADBEEF);
        let again = loaded.to_bytes();
        assert_eq!(bytes, again, "save -> load -> save must be byte-identical");
    }

    #[test]
    fn parameters_survive_bit_exactly() {
        let ckpt = sample_checkpoint();
        let loaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        for (name, t) in ckpt.params.iter() {
            let l = loaded.params.get(name).expect("block present");
            assert_eq!(t.shape(), l.shape());
            for (a, b) in t.values().iter().zip(l.values()) {
                assert_eq!(a.to_bits(), b.to_bits(), "block {name} drifted");
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected_without_partial_state() {
        let bytes = sample_checkpoint().to_bytes();
        let cut = bytes.len() - 9;
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::CheckpointFormat(_)), "{err}");
        // header-only truncation
        let err2 = Checkpoint::from_bytes(&bytes[..40]).unwrap_err();
        assert!(matches!(err2, Error::CheckpointFormat(_)), "{err2}");
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample_checkpoint().to_bytes();
        // rewrite the version token in place: "RGCD-CKPT v1" -> "v9"
        let pos = bytes.windows(2).position(|w| w == b"v1").unwrap();
        bytes[pos + 1] = b'9';
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::CheckpointVersion { .. }), "{err}");
    }

    #[test]
    fn teacher_reconstruction_matches() {
        let ckpt = sample_checkpoint();
        let teacher = ckpt.teacher().unwrap();
        assert_eq!(teacher.d_z, 3);
        assert_eq!(teacher.hidden, 8);
        assert!(teacher.params.contains("in_w"));
    }

    #[test]
    fn cm_block_roundtrip_preserves_frequency_bank() {
        let cfg = RunConfig::default();
        let teacher = TeacherModel::init(
            cfg.d_z,
            cfg.n_classes,
            cfg.teacher_hidden,
            cfg.sched_n,
            &mut Rng::new(2),
        );
        let cm = ConsistencyModel::from_teacher(&teacher, cfg.sigma_data);
        let mut ckpt = Checkpoint::new(cfg, 0, 0);
        cm_blocks(&mut ckpt, &cm, &cm.params.clone());
        let loaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        let cm2 = loaded.consistency_model().unwrap();
        assert_eq!(cm2.omega_emb, cm.omega_emb);
        assert_eq!(cm2.params.max_abs_diff(&cm.params), 0.0);
        assert!(loaded.ema_params().is_ok());
    }
}
