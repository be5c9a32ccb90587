//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CATN"            4 bytes
//! version           u32
//! layer count       u32
//! init seed         u64
//! input layout      u8 tag (0 flat, 1 image) + 3 × u32
//! per layer         u8 tag + 4 × u32 spec fields,
//!                   then weight and bias as f64 blobs for dense/conv
//! ```

use std::path::Path;

use super::{FeatureShape, LayerSpec, Network, ParamKind, ParamId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CATN";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated at byte {} (wanted {n} more)", self.pos)
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

impl<S: Scalar> Network<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.num_params() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, self.layers.len());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let (tag, dims) = match self.input {
            FeatureShape::Flat(d) => (0u8, [d, 0, 0]),
            FeatureShape::Image {
                channels,
                height,
                width,
            } => (1u8, [channels, height, width]),
        };
        out.push(tag);
        dims.iter().for_each(|&d| put_u32(&mut out, d));
        for layer in &self.layers {
            let (tag, fields) = match layer.spec {
                LayerSpec::Dense { in_dim, out_dim } => (0u8, [in_dim, out_dim, 0, 0]),
                LayerSpec::Relu => (1, [0; 4]),
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                } => (2, [in_ch, out_ch, kernel, stride]),
                LayerSpec::MaxPool2d { kernel } => (3, [kernel, 0, 0, 0]),
                LayerSpec::Flatten => (4, [0; 4]),
            };
            out.push(tag);
            fields.iter().for_each(|&f| put_u32(&mut out, f));
            for t in [&layer.weight, &layer.bias].into_iter().flatten() {
                for v in t.as_slice() {
                    let v = v.to_f64().unwrap_or(f64::NAN);
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format!("bad magic {magic:?}, expected \"CATN\""));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()? as usize;
        let seed = r.u64()?;
        let tag = r.u8()?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let input = match tag {
            0 => FeatureShape::Flat(dims[0]),
            1 => FeatureShape::Image {
                channels: dims[0],
                height: dims[1],
                width: dims[2],
            },
            t => return Err(format!("unknown input layout tag {t}")),
        };
        let mut specs = Vec::with_capacity(count.min(1024));
        let mut blobs = Vec::new();
        for i in 0..count {
            let tag = r.u8()?;
            let f = [
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            ];
            let spec = match tag {
                0 => LayerSpec::Dense {
                    in_dim: f[0],
                    out_dim: f[1],
                },
                1 => LayerSpec::Relu,
                2 => LayerSpec::Conv2d {
                    in_ch: f[0],
                    out_ch: f[1],
                    kernel: f[2],
                    stride: f[3],
                },
                3 => LayerSpec::MaxPool2d { kernel: f[0] },
                4 => LayerSpec::Flatten,
                t => return Err(format!("unknown layer tag {t} at layer {i}")),
            };
            let sizes = match spec {
                LayerSpec::Dense { in_dim, out_dim } => Some((in_dim * out_dim, out_dim)),
                LayerSpec::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    ..
                } => Some((in_ch * out_ch * kernel * kernel, out_ch)),
                _ => None,
            };
            if let Some((nw, nb)) = sizes {
                let mut read = |n: usize| -> std::result::Result<Vec<S>, String> {
                    (0..n).map(|_| Ok(S::from_f64_lossy(r.f64()?))).collect()
                };
                let w = read(nw)?;
                let b = read(nb)?;
                blobs.push((i, w, b));
            }
            specs.push(spec);
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        let mut net = Network::zeroed(input, &specs, seed).map_err(|e| e.to_string())?;
        for (layer, w, b) in blobs {
            for (kind, data) in [(ParamKind::Weight, w), (ParamKind::Bias, b)] {
                net.param_mut(ParamId { layer, kind })
                    .expect("parametric layer")
                    .as_mut_slice()
                    .copy_from_slice(&data);
            }
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{mlp_specs, small_cnn_specs};

    #[test]
    fn round_trips_bit_exactly() {
        let net: Network<f64> = crate::nn::init_network(&mlp_specs(6, &[5, 4], 3), 9).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..4], b"CATN");
        let back = Network::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_bytes(), bytes);

        let input = FeatureShape::Image {
            channels: 1,
            height: 12,
            width: 12,
        };
        let cnn: Network<f64> = Network::new(input, &small_cnn_specs(1, 12, 12, 4), 2).unwrap();
        assert_eq!(Network::<f64>::from_bytes(&cnn.to_bytes()).unwrap(), cnn);
    }

    #[test]
    fn rejects_corruption() {
        let net: Network<f64> = crate::nn::init_network(&mlp_specs(3, &[2], 2), 1).unwrap();
        let mut bytes = net.to_bytes();
        assert!(Network::<f64>::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        bytes[0] = b'X';
        assert!(Network::<f64>::from_bytes(&bytes).unwrap_err().contains("magic"));
    }
}
