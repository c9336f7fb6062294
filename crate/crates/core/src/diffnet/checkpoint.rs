//! Binary model checkpoints: header, layer table, then parameter tensors in
//! declaration order and batchnorm running statistics, all native-endian.

use std::path::Path;

use super::model::{Activation, LayerSpec, ModelParams, ModelSpec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"JSMC";
const VERSION: u32 = 1;
const BOM: u32 = 0x0102_0304;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_ne_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_ne_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.pos as u64, "unexpected end of checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_ne_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_ne_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn encode_checkpoint(model: &ModelParams) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(BOM as usize);
    w.u32(VERSION as usize);
    let spec = model.spec();
    for &e in &spec.input {
        w.u32(e);
    }
    w.u32(spec.layers.len());
    for layer in &spec.layers {
        match *layer {
            LayerSpec::Conv3d { in_ch, out_ch, kernel } => {
                w.u8(0);
                w.u32(in_ch);
                w.u32(out_ch);
                w.u32(kernel);
            }
            LayerSpec::BatchNorm3d { channels, momentum } => {
                w.u8(1);
                w.u32(channels);
                w.f64(momentum);
            }
            LayerSpec::Activation(Activation::Relu) => w.u8(2),
            LayerSpec::Activation(Activation::Softplus { beta }) => {
                w.u8(3);
                w.f64(beta);
            }
            LayerSpec::Dropout { rate } => {
                w.u8(4);
                w.f64(rate);
            }
            LayerSpec::MaxPool3d => w.u8(5),
            LayerSpec::Flatten => w.u8(6),
            LayerSpec::Dense { inputs, outputs } => {
                w.u8(7);
                w.u32(inputs);
                w.u32(outputs);
            }
        }
    }
    for p in model.params() {
        for &v in p.data() {
            w.f64(v);
        }
    }
    for (m, v) in model.running_stats() {
        for &x in m.iter().chain(v) {
            w.f64(x);
        }
    }
    w.0
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format(0, "not a model checkpoint"));
    }
    if r.u32()? != BOM {
        return Err(Error::format(4, "checkpoint written with a different byte order"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
    }
    let input = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
    let count = r.usize()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos as u64;
        let layer = match r.u8()? {
            0 => LayerSpec::Conv3d { in_ch: r.usize()?, out_ch: r.usize()?, kernel: r.usize()? },
            1 => LayerSpec::BatchNorm3d { channels: r.usize()?, momentum: r.f64()? },
            2 => LayerSpec::Activation(Activation::Relu),
            3 => LayerSpec::Activation(Activation::Softplus { beta: r.f64()? }),
            4 => LayerSpec::Dropout { rate: r.f64()? },
            5 => LayerSpec::MaxPool3d,
            6 => LayerSpec::Flatten,
            7 => LayerSpec::Dense { inputs: r.usize()?, outputs: r.usize()? },
            t => return Err(Error::format(at, format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    let spec = ModelSpec { input, layers };
    spec.validate().map_err(|e| Error::format(r.pos as u64, format!("invalid layer table: {e}")))?;
    let template = super::model::build_model(&spec, 0)?;
    let mut params = Vec::with_capacity(template.params().len());
    for p in template.params() {
        let mut data = Vec::with_capacity(p.len());
        for _ in 0..p.len() {
            data.push(r.f64()?);
        }
        params.push(Tensor::new(p.shape().to_vec(), data)?);
    }
    let mut running = Vec::new();
    for (m, _) in template.running_stats() {
        let mean = (0..m.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let var = (0..m.len()).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        running.push((mean, var));
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
    }
    ModelParams::from_parts(spec, params, running)
}

pub fn save_checkpoint(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::model::{build_model, BatchStats};

    #[test]
    fn round_trip_is_exact() {
        let spec = ModelSpec::two_block(2, 8, Activation::Softplus { beta: 10.0 });
        let mut m = build_model(&spec, 11).unwrap();
        m.update_running_stats(&[
            BatchStats { mean: vec![0.3; 4], var: vec![2.0; 4] },
            BatchStats { mean: vec![-0.1; 8], var: vec![0.5; 8] },
        ]);
        let bytes = encode_checkpoint(&m);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), m);
    }

    #[test]
    fn corrupt_checkpoints_are_format_errors() {
        let m = build_model(&ModelSpec::two_block(1, 8, Activation::Relu), 1).unwrap();
        let bytes = encode_checkpoint(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format { .. })));
    }
}
