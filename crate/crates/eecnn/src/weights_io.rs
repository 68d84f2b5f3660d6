//! Bit-exact model serialization.
//!
//! Little-endian layout: magic `EEW1`, u16 version = 1, u32 trunk layer
//! count, then one record per layer: u8 kind code (1 sepconv, 2 conv,
//! 3 batchnorm, 4 leakyrelu, 5 maxpool, 6 flatten, 7 dense), u16 name
//! length + UTF-8 name, u8 frozen, u8 attribute count + (u8 key, f32 value)
//! attributes (1 stride, 2 kernel, 3 depth_mult, 4 alpha, 5 epsilon,
//! 6 pool), u32 blob count + blobs (u8 rank, u32 dims per rank, f32 data).
//! After the trunk: u32 early-exit tap index (0xFFFFFFFF if absent), then
//! the early-exit layers in the same record format until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Layer, ModelGraph};
use crate::layers::{
    BatchNormParams, Conv1x1Params, DenseParams, LayerParams, SeparableConvParams,
};

const MAGIC: &[u8; 4] = b"EEW1";
const VERSION: u16 = 1;
const EE_ABSENT: u32 = 0xFFFF_FFFF;

const KIND_SEPCONV: u8 = 1;
const KIND_CONV: u8 = 2;
const KIND_BATCHNORM: u8 = 3;
const KIND_LEAKYRELU: u8 = 4;
const KIND_MAXPOOL: u8 = 5;
const KIND_FLATTEN: u8 = 6;
const KIND_DENSE: u8 = 7;

const ATTR_STRIDE: u8 = 1;
const ATTR_KERNEL: u8 = 2;
const ATTR_DEPTH_MULT: u8 = 3;
const ATTR_ALPHA: u8 = 4;
const ATTR_EPSILON: u8 = 5;
const ATTR_POOL: u8 = 6;

/// Corrupt files must not allocate unbounded blobs.
const MAX_BLOB_ELEMENTS: u64 = 1 << 24;

pub fn save_weights(g: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(g, &mut w)
}

pub fn save_weights_to_vec(g: &ModelGraph) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_model(g, &mut buf)?;
    Ok(buf)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelGraph> {
    read_model(&mut BufReader::new(File::open(path)?))
}

pub fn load_weights_from_slice(bytes: &[u8]) -> Result<ModelGraph> {
    read_model(&mut &bytes[..])
}

fn write_model(g: &ModelGraph, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(g.layers.len() as u32).to_le_bytes())?;
    for layer in &g.layers {
        write_layer(layer, w)?;
    }
    let tap = match g.ee_tap {
        Some(t) => t as u32,
        None => EE_ABSENT,
    };
    w.write_all(&tap.to_le_bytes())?;
    if g.ee_tap.is_some() {
        for layer in &g.ee_layers {
            write_layer(layer, w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_layer(layer: &Layer, w: &mut impl Write) -> Result<()> {
    let (kind, attrs): (u8, Vec<(u8, f32)>) = match &layer.params {
        LayerParams::SeparableConv(p) => (
            KIND_SEPCONV,
            vec![
                (ATTR_STRIDE, p.stride as f32),
                (ATTR_KERNEL, p.kernel as f32),
                (ATTR_DEPTH_MULT, p.multiplier as f32),
            ],
        ),
        LayerParams::Conv1x1(_) => (
            KIND_CONV,
            vec![(ATTR_STRIDE, 1.0), (ATTR_KERNEL, 1.0)],
        ),
        LayerParams::BatchNorm(p) => (KIND_BATCHNORM, vec![(ATTR_EPSILON, p.epsilon)]),
        LayerParams::LeakyRelu { alpha } => (KIND_LEAKYRELU, vec![(ATTR_ALPHA, *alpha)]),
        LayerParams::MaxPool { pool, stride } => (
            KIND_MAXPOOL,
            vec![(ATTR_POOL, *pool as f32), (ATTR_STRIDE, *stride as f32)],
        ),
        LayerParams::Flatten => (KIND_FLATTEN, vec![]),
        LayerParams::Dense(_) => (KIND_DENSE, vec![]),
    };
    w.write_all(&[kind])?;
    let name = layer.name.as_bytes();
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&[layer.frozen as u8])?;
    w.write_all(&[attrs.len() as u8])?;
    for (key, value) in attrs {
        w.write_all(&[key])?;
        w.write_all(&value.to_le_bytes())?;
    }

    let blobs: Vec<(Vec<u32>, &[f32])> = match &layer.params {
        LayerParams::SeparableConv(p) => vec![
            (
                vec![p.kernel as u32, p.kernel as u32, p.in_channels as u32, p.multiplier as u32],
                &p.depthwise[..],
            ),
            (
                vec![(p.in_channels * p.multiplier) as u32, p.out_channels as u32],
                &p.pointwise[..],
            ),
        ],
        LayerParams::Conv1x1(p) => vec![(
            vec![p.in_channels as u32, p.out_channels as u32],
            &p.kernel[..],
        )],
        LayerParams::BatchNorm(p) => {
            let c = p.channels as u32;
            vec![
                (vec![c], &p.gamma[..]),
                (vec![c], &p.beta[..]),
                (vec![c], &p.mean[..]),
                (vec![c], &p.var[..]),
            ]
        }
        LayerParams::Dense(p) => vec![
            (vec![p.in_dim as u32, p.out_dim as u32], &p.weights[..]),
            (vec![p.out_dim as u32], &p.bias[..]),
        ],
        _ => vec![],
    };
    w.write_all(&(blobs.len() as u32).to_le_bytes())?;
    for (dims, data) in blobs {
        w.write_all(&[dims.len() as u8])?;
        for d in &dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct CountingReader<R: Read> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    fn take(&mut self, buf: &mut [u8], ctx: &str) -> Result<()> {
        let start = self.pos;
        let mut filled = 0;
        while filled < buf.len() {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        start + filled as u64,
                        format!("unexpected end of file while reading {ctx}"),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, ctx: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.take(&mut b, ctx)?;
        Ok(b[0])
    }

    fn u16(&mut self, ctx: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.take(&mut b, ctx)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, ctx)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32(&mut self, ctx: &str) -> Result<f32> {
        let mut b = [0u8; 4];
        self.take(&mut b, ctx)?;
        Ok(f32::from_le_bytes(b))
    }

    /// Read one byte, or `None` at end of file.
    fn probe_byte(&mut self) -> Result<Option<u8>> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(None),
                Ok(_) => {
                    self.pos += 1;
                    return Ok(Some(probe[0]));
                }
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

fn read_model(src: &mut impl Read) -> Result<ModelGraph> {
    let mut r = CountingReader { inner: src, pos: 0 };
    let mut magic = [0u8; 4];
    r.take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"EEW1\""));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let layer_count = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(layer_count.min(4096) as usize);
    for i in 0..layer_count {
        layers.push(read_layer(&mut r, &format!("trunk layer {i}"))?);
    }
    let tap = r.u32("early-exit tap")?;
    let (ee_tap, ee_layers) = if tap == EE_ABSENT {
        if r.probe_byte()?.is_some() {
            return Err(Error::format(r.pos - 1, "trailing data after model"));
        }
        (None, Vec::new())
    } else {
        if tap as usize >= layers.len() {
            return Err(Error::format(
                r.pos - 4,
                format!("early-exit tap {tap} out of range for {} layers", layers.len()),
            ));
        }
        let mut ee_layers = Vec::new();
        while let Some(kind) = r.probe_byte()? {
            let kind_pos = r.pos - 1;
            let ctx = format!("early-exit layer {}", ee_layers.len());
            ee_layers.push(read_layer_body(&mut r, kind, kind_pos, &ctx)?);
        }
        (Some(tap as usize), ee_layers)
    };
    Ok(ModelGraph {
        layers,
        ee_tap,
        ee_layers,
    })
}

fn read_layer<R: Read>(r: &mut CountingReader<R>, ctx: &str) -> Result<Layer> {
    let kind_pos = r.pos;
    let kind = r.u8(&format!("{ctx} kind"))?;
    read_layer_body(r, kind, kind_pos, ctx)
}

fn read_layer_body<R: Read>(
    r: &mut CountingReader<R>,
    kind: u8,
    kind_pos: u64,
    ctx: &str,
) -> Result<Layer> {
    let name_len = r.u16(&format!("{ctx} name length"))? as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.take(&mut name_bytes, &format!("{ctx} name"))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::format(r.pos - name_len as u64, format!("{ctx} name is not UTF-8")))?;
    let frozen = r.u8(&format!("{ctx} frozen flag"))? != 0;
    let attr_count = r.u8(&format!("{ctx} attribute count"))?;
    let mut attrs: Vec<(u8, f32)> = Vec::with_capacity(attr_count as usize);
    for _ in 0..attr_count {
        let key = r.u8(&format!("{ctx} attribute key"))?;
        let value = r.f32(&format!("{ctx} attribute value"))?;
        attrs.push((key, value));
    }
    let attr = |key: u8| attrs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);

    let blob_count = r.u32(&format!("{ctx} blob count"))?;
    let mut blobs: Vec<(Vec<u32>, Vec<f32>)> = Vec::with_capacity(blob_count.min(16) as usize);
    for b in 0..blob_count {
        let rank_pos = r.pos;
        let rank = r.u8(&format!("{ctx} blob {b} rank"))?;
        if rank == 0 || rank > 4 {
            return Err(Error::format(rank_pos, format!("{ctx} blob {b} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        let mut elements = 1u64;
        for d in 0..rank {
            let dim = r.u32(&format!("{ctx} blob {b} dim {d}"))?;
            elements = elements.saturating_mul(dim as u64);
            dims.push(dim);
        }
        if elements > MAX_BLOB_ELEMENTS {
            return Err(Error::format(
                rank_pos,
                format!("{ctx} blob {b} claims {elements} elements"),
            ));
        }
        let mut data = Vec::with_capacity(elements as usize);
        for _ in 0..elements {
            data.push(r.f32(&format!("{ctx} blob {b} data"))?);
        }
        blobs.push((dims, data));
    }

    let bad = |reason: String| Error::format(kind_pos, format!("{ctx}: {reason}"));
    let params = match kind {
        KIND_SEPCONV => {
            if blobs.len() != 2 {
                return Err(bad(format!("separable conv needs 2 blobs, has {}", blobs.len())));
            }
            let (dw_dims, depthwise) = blobs.remove(0);
            let (pw_dims, pointwise) = blobs.remove(0);
            if dw_dims.len() != 4 || pw_dims.len() != 2 {
                return Err(bad("separable conv blob ranks must be 4 and 2".into()));
            }
            let kernel = dw_dims[0] as usize;
            let in_channels = dw_dims[2] as usize;
            let multiplier = dw_dims[3] as usize;
            let out_channels = pw_dims[1] as usize;
            if dw_dims[1] as usize != kernel {
                return Err(bad("depthwise kernel is not square".into()));
            }
            if pw_dims[0] as usize != in_channels * multiplier {
                return Err(bad("pointwise rows do not match depthwise output".into()));
            }
            let stride = attr(ATTR_STRIDE).unwrap_or(1.0) as usize;
            if let Some(k) = attr(ATTR_KERNEL) {
                if k as usize != kernel {
                    return Err(bad("kernel attribute disagrees with blob dims".into()));
                }
            }
            if let Some(m) = attr(ATTR_DEPTH_MULT) {
                if m as usize != multiplier {
                    return Err(bad("depth_mult attribute disagrees with blob dims".into()));
                }
            }
            LayerParams::SeparableConv(SeparableConvParams {
                in_channels,
                out_channels,
                kernel,
                stride,
                multiplier,
                depthwise,
                pointwise,
            })
        }
        KIND_CONV => {
            if blobs.len() != 1 {
                return Err(bad(format!("1x1 conv needs 1 blob, has {}", blobs.len())));
            }
            let (dims, kernel) = blobs.remove(0);
            if dims.len() != 2 {
                return Err(bad("1x1 conv blob rank must be 2".into()));
            }
            LayerParams::Conv1x1(Conv1x1Params {
                in_channels: dims[0] as usize,
                out_channels: dims[1] as usize,
                kernel,
            })
        }
        KIND_BATCHNORM => {
            if blobs.len() != 4 {
                return Err(bad(format!("batchnorm needs 4 blobs, has {}", blobs.len())));
            }
            let channels = blobs[0].0[0] as usize;
            if blobs.iter().any(|(d, _)| d.len() != 1 || d[0] as usize != channels) {
                return Err(bad("batchnorm blobs must share one channel dim".into()));
            }
            let epsilon = attr(ATTR_EPSILON).unwrap_or(1e-3);
            if epsilon <= 0.0 {
                return Err(bad(format!("batchnorm epsilon {epsilon} must be > 0")));
            }
            let var = blobs.remove(3).1;
            if var.iter().any(|v| *v < 0.0) {
                return Err(bad("batchnorm variance entries must be >= 0".into()));
            }
            let mean = blobs.remove(2).1;
            let beta = blobs.remove(1).1;
            let gamma = blobs.remove(0).1;
            LayerParams::BatchNorm(BatchNormParams {
                channels,
                gamma,
                beta,
                mean,
                var,
                epsilon,
            })
        }
        KIND_LEAKYRELU => {
            let alpha = attr(ATTR_ALPHA).unwrap_or(0.1);
            if alpha < 0.0 {
                return Err(bad(format!("leaky relu slope {alpha} must be >= 0")));
            }
            LayerParams::LeakyRelu { alpha }
        }
        KIND_MAXPOOL => LayerParams::MaxPool {
            pool: attr(ATTR_POOL).unwrap_or(2.0) as usize,
            stride: attr(ATTR_STRIDE).unwrap_or(2.0) as usize,
        },
        KIND_FLATTEN => LayerParams::Flatten,
        KIND_DENSE => {
            if blobs.len() != 2 {
                return Err(bad(format!("dense needs 2 blobs, has {}", blobs.len())));
            }
            let (w_dims, weights) = blobs.remove(0);
            let (b_dims, bias) = blobs.remove(0);
            if w_dims.len() != 2 || b_dims.len() != 1 || b_dims[0] != w_dims[1] {
                return Err(bad("dense blob dims are inconsistent".into()));
            }
            LayerParams::Dense(DenseParams {
                in_dim: w_dims[0] as usize,
                out_dim: w_dims[1] as usize,
                weights,
                bias,
            })
        }
        other => return Err(Error::format(kind_pos, format!("{ctx}: unknown layer kind {other}"))),
    };
    Ok(Layer {
        name,
        params,
        frozen,
    })
}
