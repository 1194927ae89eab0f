//! Weight file format.
//!
//! ```text
//! "BCNN"              4 bytes
//! version             u32
//! config_len          u32, then the config block
//! tensor_count        u32
//! per tensor:         name_len u16, name, ndim u8, dims u32 x ndim,
//!                     values f32 x product(dims)
//! crc32               u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The config block holds:
//! architecture u8, input_len u32, filter count u32 + filters u32 each,
//! kernel_width u32, pool_width u32, dense_units u32, lstm_hidden u32,
//! num_classes u32, dropout_dense f64, dropout_lstm f64, l2_lambda f64,
//! seed u64.

use std::fs;
use std::path::Path;

use super::{expected_shapes, Architecture, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const WEIGHT_MAGIC: &[u8; 4] = b"BCNN";
pub const WEIGHT_VERSION: u32 = 1;

fn encode_config(cfg: &ModelConfig, out: &mut Vec<u8>) {
    out.push(cfg.architecture.code());
    out.extend_from_slice(&(cfg.input_len as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.conv_filters.len() as u32).to_le_bytes());
    for &f in &cfg.conv_filters {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    for v in [cfg.kernel_width, cfg.pool_width, cfg.dense_units, cfg.lstm_hidden, cfg.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [cfg.dropout_dense, cfg.dropout_lstm, cfg.l2_lambda] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Format("weight file is truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let architecture = Architecture::from_code(r.u8()?).map_err(|e| Error::Format(e.to_string()))?;
    let input_len = r.u32()? as usize;
    let nfilters = r.u32()? as usize;
    if nfilters > 64 {
        return Err(Error::Format(format!("implausible conv layer count {nfilters}")));
    }
    let conv_filters = (0..nfilters).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let kernel_width = r.u32()? as usize;
    let pool_width = r.u32()? as usize;
    let dense_units = r.u32()? as usize;
    let lstm_hidden = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let dropout_dense = r.f64()?;
    let dropout_lstm = r.f64()?;
    let l2_lambda = r.f64()?;
    let seed = r.u64()?;
    Ok(ModelConfig {
        architecture,
        input_len,
        conv_filters,
        kernel_width,
        pool_width,
        dense_units,
        lstm_hidden,
        num_classes,
        dropout_dense,
        dropout_lstm,
        l2_lambda,
        seed,
    })
}

pub fn encode_model(params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * params.count_params());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    let mut cfg = Vec::new();
    encode_config(&params.config, &mut cfg);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model(data: &[u8]) -> Result<ModelParams<f32>> {
    if data.len() < 12 || &data[..4] != WEIGHT_MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let mut r = Reader { data, pos: 4 };
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let (body, crc_bytes) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Format("checksum mismatch (file truncated or corrupted)".into()));
    }
    let mut r = Reader { data: body, pos: 8 };
    let cfg_len = r.u32()? as usize;
    let mut cfg_reader = Reader {
        data: r.take(cfg_len)?,
        pos: 0,
    };
    let config = decode_config(&mut cfg_reader)?;
    config.validate().map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    let expected = expected_shapes(&config)?;
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "expected {} tensors for {}, found {count}",
            expected.len(),
            config.architecture
        )));
    }
    let mut params = super::build_model::<f32>(&ModelConfig { seed: config.seed, ..config.clone() })?;
    {
        let slots = params.tensors_mut();
        for ((exp_name, exp_shape), slot) in expected.iter().zip(slots) {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != exp_name {
                return Err(Error::Format(format!("expected tensor `{exp_name}`, found `{name}`")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            if &shape != exp_shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {shape:?}, config implies {exp_shape:?}"
                )));
            }
            let n: usize = shape.iter().product();
            let values = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *slot = Tensor::new(shape, values)?;
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Ok(params)
}

pub fn save_model(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_model(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, predict_proba};

    fn small(arch: Architecture) -> ModelConfig {
        ModelConfig {
            input_len: 200,
            conv_filters: vec![3, 4],
            kernel_width: 5,
            pool_width: 3,
            dense_units: 8,
            lstm_hidden: 4,
            seed: 9,
            ..ModelConfig::reference(arch)
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for arch in Architecture::ALL {
            let params = build_model::<f32>(&small(arch)).unwrap();
            let back = decode_model(&encode_model(&params)).unwrap();
            assert_eq!(back, params);
            let x = Tensor::<f32>::full(&[3, 200], 17.0);
            let a = predict_proba(&params, &x).unwrap();
            let b = predict_proba(&back, &x).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_model(&build_model::<f32>(&small(Architecture::Cnn)).unwrap());
        bytes[1] = b'X';
        assert!(matches!(decode_model(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = encode_model(&build_model::<f32>(&small(Architecture::CnnBiLstm)).unwrap());
        assert!(matches!(decode_model(&bytes[..bytes.len() - 9]), Err(Error::Format(_))));
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(decode_model(&flipped), Err(Error::Format(_))));
        let mut version = bytes;
        version[4] = 7;
        assert!(matches!(decode_model(&version), Err(Error::Format(_))));
    }

    #[test]
    fn shape_inconsistent_with_config_is_rejected() {
        let params = build_model::<f32>(&small(Architecture::CnnUniLstm)).unwrap();
        let mut bytes = encode_model(&params);
        // Locate the config's lstm_hidden field and change it; shapes no
        // longer match, so re-checksum to isolate the shape check.
        let cfg_start = 12;
        let hidden_off = cfg_start + 1 + 4 + 4 + 4 * 2 + 4 * 3;
        bytes[hidden_off] = 5;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        let err = decode_model(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }
}
