//! Network checkpoints.
//!
//! Little-endian binary, one network per file:
//!
//!   magic        4 bytes   "REMI"
//!   version      u32       currently 1
//!   seed         u64       init seed the network was built from
//!   input rank   u32
//!   input dims   u32 each
//!   layer count  u32
//!   per layer:   kind u32, hyper count u32, hyper values u32 each
//!   parameters   f64 each, layers in order, weight before bias
//!
//! Hyper values by kind:
//!   dense     [in, out]
//!   conv2d    [out_ch, in_ch, kernel, stride, padding]
//!   maxpool2d [kernel, stride]
//!   relu / flatten / softmax: none
//!
//! Loaders reject unknown magic or version, truncation, and trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{Layer, LayerKind};
use crate::net::Network;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"REMI";
const VERSION: u32 = 1;

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&net.seed().to_le_bytes());
    push_u32(&mut buf, net.input_shape().len());
    for &d in net.input_shape() {
        push_u32(&mut buf, d);
    }
    push_u32(&mut buf, net.layers().len());
    for layer in net.layers() {
        push_u32(&mut buf, layer.kind().tag() as usize);
        let hyper = layer_hyper(layer);
        push_u32(&mut buf, hyper.len());
        for h in hyper {
            push_u32(&mut buf, h);
        }
    }
    for v in net.param_vector() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    fs::write(path, buf).map_err(Error::at(path))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(Error::at(path))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    let magic = c.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, want {MAGIC:?}")));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let seed = c.u64()?;
    let rank = c.u32()? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(c.u32()? as usize);
    }
    let layer_count = c.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let kind = LayerKind::from_tag(c.u32()?)?;
        let nh = c.u32()? as usize;
        let mut hyper = Vec::with_capacity(nh);
        for _ in 0..nh {
            hyper.push(c.u32()? as usize);
        }
        layers.push(layer_from_hyper(kind, &hyper)?);
    }
    let param_len: usize = layers.iter().map(Layer::param_count).sum();
    let mut params = Vec::with_capacity(param_len);
    for _ in 0..param_len {
        params.push(c.f64()?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameters",
            bytes.len() - c.pos
        )));
    }
    let mut net = Network::from_parts(seed, &input_shape, layers)?;
    net.set_param_vector(&params)?;
    Ok(net)
}

fn layer_hyper(layer: &Layer) -> Vec<usize> {
    match layer {
        Layer::Dense { weight, .. } => vec![weight.shape[0], weight.shape[1]],
        Layer::Conv2d { weight, stride, padding, .. } => vec![
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            *stride,
            *padding,
        ],
        Layer::MaxPool2d { kernel, stride } => vec![*kernel, *stride],
        Layer::Relu | Layer::Flatten | Layer::Softmax => vec![],
    }
}

fn layer_from_hyper(kind: LayerKind, hyper: &[usize]) -> Result<Layer> {
    let want = |n: usize| {
        if hyper.len() == n {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{kind:?} expects {n} hyper values, checkpoint has {}",
                hyper.len()
            )))
        }
    };
    Ok(match kind {
        LayerKind::Dense => {
            want(2)?;
            Layer::dense(hyper[0], hyper[1])
        }
        LayerKind::Conv2d => {
            want(5)?;
            Layer::Conv2d {
                weight: Tensor::zeros(&[hyper[0], hyper[1], hyper[2], hyper[2]]),
                bias: Tensor::zeros(&[hyper[0]]),
                stride: hyper[3],
                padding: hyper[4],
            }
        }
        LayerKind::Relu => {
            want(0)?;
            Layer::Relu
        }
        LayerKind::MaxPool2d => {
            want(2)?;
            Layer::MaxPool2d { kernel: hyper[0], stride: hyper[1] }
        }
        LayerKind::Flatten => {
            want(0)?;
            Layer::Flatten
        }
        LayerKind::Softmax => {
            want(0)?;
            Layer::Softmax
        }
    })
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::arch;

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.remi");
        let net = arch::small_cnn(99, [1, 8, 8], &[3], 10, 4).unwrap();
        save(&net, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.param_vector(), net.param_vector());
        assert_eq!(loaded.seed(), net.seed());
        assert_eq!(loaded.input_shape(), net.input_shape());
        assert_eq!(loaded.layers().len(), net.layers().len());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.remi");
        let net = arch::mlp(1, 4, &[3], 2).unwrap();
        save(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.remi");
        let net = arch::mlp(1, 4, &[3], 2).unwrap();
        save(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.remi");
        let net = arch::mlp(1, 4, &[3], 2).unwrap();
        save(&net, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));

        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, longer).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn loaded_network_runs_forward_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.remi");
        let net = arch::mlp(5, 6, &[4], 3).unwrap();
        let batch = Tensor::from_vec(&[1, 6], vec![0.3; 6]).unwrap();
        let before = net.forward(&batch).unwrap();
        save(&net, &path).unwrap();
        let after = load(&path).unwrap().forward(&batch).unwrap();
        assert_eq!(before.data, after.data);
    }
}
