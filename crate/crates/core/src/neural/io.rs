//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PRSN"  version:u16  layer_count:u16
//! per layer:
//!   kind_tag:u8
//!   per parameter tensor (weight, bias; conv2d and dense only):
//!     rank:u8  dims:u32 x rank  values:f32 x product(dims)
//! ```

use super::{shape_trace, LayerSpec, Network, NeuralError, Params, Tensor};

const MAGIC: &[u8; 4] = b"PRSN";
const VERSION: u16 = 1;

pub fn save_weights(net: &Network) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + net.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.spec.len() as u16).to_le_bytes());
    for (layer, params) in net.spec.iter().zip(&net.params) {
        out.push(layer.tag());
        if let Some(p) = params {
            for t in [&p.weight, &p.bias] {
                out.push(t.shape.len() as u8);
                for &d in &t.shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in &t.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NeuralError::TruncatedPayload(self.bytes.len())),
        }
    }

    fn u8(&mut self) -> Result<u8, NeuralError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NeuralError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, expected: &[usize]) -> Result<Tensor, NeuralError> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        if shape != expected {
            return Err(NeuralError::ShapeTableMismatch(format!("stored shape {shape:?}, expected {expected:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Tensor { shape, data })
    }
}

/// Loads parameters for `spec` applied to `input_shape`, validating every
/// stored shape against the ones the spec implies.
pub fn load_weights(bytes: &[u8], spec: &[LayerSpec], input_shape: &[usize]) -> Result<Network, NeuralError> {
    let shapes = shape_trace(spec, input_shape)?;
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(NeuralError::BadMagic("missing PRSN magic".into()));
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(NeuralError::BadMagic(format!("unsupported version {version}")));
    }
    let count = r.u16()? as usize;
    if count != spec.len() {
        return Err(NeuralError::ShapeTableMismatch(format!("{count} stored layers, spec has {}", spec.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (i, layer) in spec.iter().enumerate() {
        let tag = r.u8()?;
        if tag != layer.tag() {
            return Err(NeuralError::ShapeTableMismatch(format!(
                "layer {i}: stored kind tag {tag}, spec expects {}",
                layer.tag()
            )));
        }
        params.push(match layer.param_shapes(&shapes[i]) {
            Some((ws, bs)) => {
                let weight = r.tensor(&ws)?;
                let bias = r.tensor(&bs)?;
                if !weight.is_finite() || !bias.is_finite() {
                    return Err(NeuralError::NonFiniteValue("stored parameters"));
                }
                Some(Params { weight, bias })
            }
            None => None,
        });
    }
    if r.pos != bytes.len() {
        return Err(NeuralError::ShapeTableMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Network { spec: spec.to_vec(), input_shape: input_shape.to_vec(), params, rng_seed: 0 })
}
