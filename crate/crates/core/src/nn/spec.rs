//! Model description, parameter layout and the `FKPV` parameter file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Stream;

/// One layer of a [`ModelSpec`]. Convolutions use zero padding of `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
    GlobalAvgPool,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Layer::Conv {
                out_channels,
                kernel,
                stride,
            } => write!(f, "conv{out_channels}k{kernel}s{stride}"),
            Layer::Dense { out_features } => write!(f, "dense{out_features}"),
            Layer::Relu => f.write_str("relu"),
            Layer::GlobalAvgPool => f.write_str("gap"),
        }
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad layer descriptor {s:?}"));
        let num = |t: &str| t.parse::<usize>().map_err(|_| bad());
        match s.trim() {
            "relu" => Ok(Layer::Relu),
            "gap" => Ok(Layer::GlobalAvgPool),
            t if t.starts_with("dense") => Ok(Layer::Dense {
                out_features: num(&t[5..])?,
            }),
            t if t.starts_with("conv") => {
                let rest = &t[4..];
                let (ch, rest) = rest.split_once('k').ok_or_else(bad)?;
                let (k, s) = rest.split_once('s').ok_or_else(bad)?;
                Ok(Layer::Conv {
                    out_channels: num(ch)?,
                    kernel: num(k)?,
                    stride: num(s)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Activation shape of a single sample: channels x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A layer with its resolved input/output shapes and parameter offset.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PlannedLayer {
    pub layer: Layer,
    pub input: Shape3,
    pub output: Shape3,
    /// Offset of this layer's weights in the flat parameter vector.
    pub offset: usize,
    /// Weights followed by biases.
    pub weight_len: usize,
    pub bias_len: usize,
}

/// Single-channel image classifier description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_resolution: usize,
    pub layers: Vec<Layer>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_resolution: usize, layers: Vec<Layer>, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_resolution,
            layers,
            num_classes,
        };
        spec.plan()?;
        Ok(spec)
    }

    /// conv8-relu-conv16/2-relu-conv32/2-relu-gap-dense on 32x32 inputs.
    pub fn desk_default() -> Self {
        Self::new(
            32,
            vec![
                Layer::Conv { out_channels: 8, kernel: 3, stride: 1 },
                Layer::Relu,
                Layer::Conv { out_channels: 16, kernel: 3, stride: 2 },
                Layer::Relu,
                Layer::Conv { out_channels: 32, kernel: 3, stride: 2 },
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Dense { out_features: 4 },
            ],
            4,
        )
        .expect("default spec is valid")
    }

    pub(crate) fn plan(&self) -> Result<Vec<PlannedLayer>> {
        if self.input_resolution == 0 || self.num_classes == 0 {
            return Err(Error::InvalidShape("resolution and class count must be >= 1".into()));
        }
        match self.layers.last() {
            Some(Layer::Dense { out_features }) if *out_features == self.num_classes => {}
            _ => {
                return Err(Error::InvalidShape(format!(
                    "final layer must be dense with {} outputs",
                    self.num_classes
                )))
            }
        }
        let mut shape = Shape3 {
            c: 1,
            h: self.input_resolution,
            w: self.input_resolution,
        };
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for &layer in &self.layers {
            let (output, weight_len, bias_len) = match layer {
                Layer::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::InvalidShape(format!("degenerate layer {layer}")));
                    }
                    let pad = kernel / 2;
                    if shape.h + 2 * pad < kernel || shape.w + 2 * pad < kernel {
                        return Err(Error::InvalidShape(format!("{layer} larger than its input")));
                    }
                    let h = (shape.h + 2 * pad - kernel) / stride + 1;
                    let w = (shape.w + 2 * pad - kernel) / stride + 1;
                    (
                        Shape3 { c: out_channels, h, w },
                        out_channels * shape.c * kernel * kernel,
                        out_channels,
                    )
                }
                Layer::Dense { out_features } => {
                    if out_features == 0 {
                        return Err(Error::InvalidShape("dense layer with zero outputs".into()));
                    }
                    (
                        Shape3 { c: out_features, h: 1, w: 1 },
                        out_features * shape.len(),
                        out_features,
                    )
                }
                Layer::Relu => (shape, 0, 0),
                Layer::GlobalAvgPool => (Shape3 { c: shape.c, h: 1, w: 1 }, 0, 0),
            };
            out.push(PlannedLayer {
                layer,
                input: shape,
                output,
                offset,
                weight_len,
                bias_len,
            });
            offset += weight_len + bias_len;
            shape = output;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.plan()
            .map(|p| p.iter().map(|l| l.weight_len + l.bias_len).sum())
            .unwrap_or(0)
    }

    /// SHA-256 of the canonical text form; binds parameter vectors to this spec.
    pub fn hash(&self) -> [u8; 32] {
        let canonical = format!("fedkappa-model-v1;{self}");
        Sha256::digest(canonical.as_bytes()).into()
    }

    /// He-normal weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let plan = self.plan().expect("validated spec");
        let mut values = vec![0.0f32; self.param_count()];
        let mut rng = Stream::derived(seed, "init", &[]);
        for l in &plan {
            let fan_in = match l.layer {
                Layer::Conv { kernel, .. } => l.input.c * kernel * kernel,
                Layer::Dense { .. } => l.input.len(),
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            for v in &mut values[l.offset..l.offset + l.weight_len] {
                *v = (rng.normal() * std) as f32;
            }
        }
        ParamVector {
            values,
            spec_hash: self.hash(),
        }
    }
}

/// `res=32;classes=4;conv8k3s1,relu,...,dense4`
impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "res={};classes={};", self.input_resolution, self.num_classes)?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad model spec {s:?}"));
        let mut parts = s.trim().splitn(3, ';');
        let res = parts
            .next()
            .and_then(|p| p.strip_prefix("res="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let classes = parts
            .next()
            .and_then(|p| p.strip_prefix("classes="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(bad)?;
        let layers = parts
            .next()
            .ok_or_else(bad)?
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Layer>>>()?;
        ModelSpec::new(res, layers, classes)
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const PARAM_MAGIC: &[u8; 4] = b"FKPV";
pub const PARAM_VERSION: u16 = 1;
const PARAM_HEADER: usize = 4 + 2 + 32 + 8;

/// Flat model weights bound to a spec by hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f32>,
    pub spec_hash: [u8; 32],
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.param_count()],
            spec_hash: spec.hash(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.spec_hash != spec.hash() {
            return Err(Error::SpecMismatch("spec hash differs".into()));
        }
        if self.values.len() != spec.param_count() {
            return Err(Error::SpecMismatch(format!(
                "{} values for a spec with {} parameters",
                self.values.len(),
                spec.param_count()
            )));
        }
        Ok(())
    }

    /// Checks that `other` can be combined element-wise with `self`.
    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.spec_hash != other.spec_hash || self.values.len() != other.values.len() {
            return Err(Error::SpecMismatch(format!(
                "vectors of length {} and {} (or different specs)",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }

    /// `after - before`, element-wise in f32.
    pub fn delta(before: &ParamVector, after: &ParamVector) -> Result<ParamVector> {
        before.check_compatible(after)?;
        Ok(ParamVector {
            values: after.values.iter().zip(&before.values).map(|(a, b)| a - b).collect(),
            spec_hash: before.spec_hash,
        })
    }

    /// `self + delta`, summed in f64 and rounded once.
    pub fn apply_delta(&self, delta: &ParamVector) -> Result<ParamVector> {
        self.check_compatible(delta)?;
        Ok(ParamVector {
            values: self
                .values
                .iter()
                .zip(&delta.values)
                .map(|(&p, &d)| (p as f64 + d as f64) as f32)
                .collect(),
            spec_hash: self.spec_hash,
        })
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PARAM_HEADER + 4 * self.values.len());
        self.write_into(&mut out);
        out
    }

    pub fn write_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Parses one vector from the front of `bytes`; returns it and the bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(ParamVector, usize)> {
        if bytes.len() < 4 {
            return Err(Error::Truncated { needed: 4, available: bytes.len() });
        }
        if &bytes[..4] != PARAM_MAGIC {
            return Err(Error::BadMagic(bytes[..4].to_vec()));
        }
        if bytes.len() < PARAM_HEADER {
            return Err(Error::Truncated { needed: PARAM_HEADER, available: bytes.len() });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != PARAM_VERSION {
            return Err(Error::VersionMismatch { got: version, expected: PARAM_VERSION });
        }
        let mut spec_hash = [0u8; 32];
        spec_hash.copy_from_slice(&bytes[6..38]);
        let count = u64::from_le_bytes(bytes[38..46].try_into().unwrap());
        let body = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Malformed(format!("parameter count {count} too large")))?;
        let needed = PARAM_HEADER + body;
        if bytes.len() < needed {
            return Err(Error::Truncated { needed, available: bytes.len() });
        }
        let values = bytes[PARAM_HEADER..needed]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((ParamVector { values, spec_hash }, needed))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamVector> {
        let (pv, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(pv)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamVector> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
