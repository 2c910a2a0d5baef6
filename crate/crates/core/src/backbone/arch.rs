use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{BatchNorm, Conv2d, ParamId, ParamStore, Session};
use crate::tensor::{Conv2dConfig, Real, Var};
use crate::{Error, Result};

/// Encoder family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderArch {
    /// Five-stage residual CNN small enough to train on a CPU.
    Desk,
    /// Five-stage ResNet-50 layout (stem + four bottleneck stages, last stride 1).
    Resnet50,
}

impl FromStr for EncoderArch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "resnet50" => Ok(Self::Resnet50),
            other => Err(Error::Config(format!("unknown encoder.arch `{other}` (expected desk or resnet50)"))),
        }
    }
}

impl fmt::Display for EncoderArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Resnet50 => "resnet50",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BlockKind {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum StageLayout {
    Stem { out: usize, kernel: usize, stride: usize, pool: bool },
    Residual { kind: BlockKind, blocks: usize, planes: usize, stride: usize },
}

pub(crate) const NUM_STAGES: usize = 5;

impl EncoderArch {
    /// Stage layouts and the resulting feature width.
    pub(crate) fn layout(self, dim: usize) -> Result<(Vec<StageLayout>, usize)> {
        use StageLayout::*;
        match self {
            Self::Desk => {
                if dim == 0 {
                    return Err(Error::Config("encoder.dim must be at least 1".into()));
                }
                Ok((
                    vec![
                        Stem { out: 16, kernel: 3, stride: 2, pool: false },
                        Residual { kind: BlockKind::Basic, blocks: 1, planes: 32, stride: 2 },
                        Residual { kind: BlockKind::Basic, blocks: 1, planes: 64, stride: 2 },
                        Residual { kind: BlockKind::Basic, blocks: 1, planes: 128, stride: 2 },
                        Residual { kind: BlockKind::Basic, blocks: 1, planes: dim, stride: 1 },
                    ],
                    dim,
                ))
            }
            Self::Resnet50 => {
                if dim != 2048 {
                    return Err(Error::Config(format!("encoder.arch resnet50 produces 2048-d features, encoder.dim is {dim}")));
                }
                Ok((
                    vec![
                        Stem { out: 64, kernel: 7, stride: 2, pool: true },
                        Residual { kind: BlockKind::Bottleneck, blocks: 3, planes: 64, stride: 1 },
                        Residual { kind: BlockKind::Bottleneck, blocks: 4, planes: 128, stride: 2 },
                        Residual { kind: BlockKind::Bottleneck, blocks: 6, planes: 256, stride: 2 },
                        Residual { kind: BlockKind::Bottleneck, blocks: 3, planes: 512, stride: 1 },
                    ],
                    2048,
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Shortcut {
    conv: Conv2d,
    bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    convs: Vec<Conv2d>,
    bns: Vec<BatchNorm>,
    shortcut: Option<Shortcut>,
}

impl Block {
    fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        kind: BlockKind,
        (c_in, planes, stride): (usize, usize, usize),
        rng: &mut R,
    ) -> (Self, usize) {
        let conv = |store: &mut ParamStore<F>, rng: &mut R, i: usize, shape, stride, padding| {
            Conv2d::new(store, &format!("{name}.conv{i}"), shape, Conv2dConfig { stride, padding }, rng)
        };
        let (convs, c_out) = match kind {
            BlockKind::Basic => (
                vec![conv(store, rng, 1, (c_in, planes, 3), stride, 1), conv(store, rng, 2, (planes, planes, 3), 1, 1)],
                planes,
            ),
            BlockKind::Bottleneck => (
                vec![
                    conv(store, rng, 1, (c_in, planes, 1), 1, 0),
                    conv(store, rng, 2, (planes, planes, 3), stride, 1),
                    conv(store, rng, 3, (planes, planes * 4, 1), 1, 0),
                ],
                planes * 4,
            ),
        };
        let bns = convs
            .iter()
            .enumerate()
            .map(|(i, c)| BatchNorm::new(store, &format!("{name}.bn{}", i + 1), store.get(c.weight).shape()[0]))
            .collect();
        let shortcut = (stride != 1 || c_in != c_out).then(|| Shortcut {
            conv: Conv2d::new(store, &format!("{name}.down.conv"), (c_in, c_out, 1), Conv2dConfig { stride, padding: 0 }, rng),
            bn: BatchNorm::new(store, &format!("{name}.down.bn"), c_out),
        });
        (Self { convs, bns, shortcut }, c_out)
    }

    fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        let last = self.convs.len() - 1;
        let mut y = x;
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            y = bn.forward(s, conv.forward(s, y));
            if i != last {
                y = y.relu();
            }
        }
        let identity = match &self.shortcut {
            Some(sc) => sc.bn.forward(s, sc.conv.forward(s, x)),
            None => x,
        };
        y.add(identity).relu()
    }

    fn tensors(&self, out: &mut Vec<ParamId>, buffers: &mut Vec<ParamId>) {
        for (c, b) in self.convs.iter().zip(&self.bns) {
            out.extend(c.params());
            out.extend(b.params());
            buffers.extend(b.buffers());
        }
        if let Some(sc) = &self.shortcut {
            out.extend(sc.conv.params());
            out.extend(sc.bn.params());
            buffers.extend(sc.bn.buffers());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Stem { conv: Conv2d, bn: BatchNorm, pool: bool },
    Blocks(Vec<Block>),
}

/// One stage of the staged encoder.
///
/// Streams that share a stage hold clones of the same `Stage`, i.e. the same
/// parameter ids and therefore the same storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub index: usize,
    body: Body,
    params: Vec<ParamId>,
    buffers: Vec<ParamId>,
}

impl Stage {
    pub(crate) fn new<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        index: usize,
        layout: &StageLayout,
        c_in: usize,
        rng: &mut R,
    ) -> (Self, usize) {
        let name = format!("{prefix}.stage{index}");
        let (body, c_out) = match *layout {
            StageLayout::Stem { out, kernel, stride, pool } => {
                let conv = Conv2d::new(store, &format!("{name}.conv"), (c_in, out, kernel), Conv2dConfig { stride, padding: kernel / 2 }, rng);
                let bn = BatchNorm::new(store, &format!("{name}.bn"), out);
                (Body::Stem { conv, bn, pool }, out)
            }
            StageLayout::Residual { kind, blocks, planes, stride } => {
                let mut c = c_in;
                let mut list = Vec::with_capacity(blocks);
                for b in 0..blocks {
                    let (block, c_out) = Block::new(store, &format!("{name}.block{b}"), kind, (c, planes, if b == 0 { stride } else { 1 }), rng);
                    list.push(block);
                    c = c_out;
                }
                (Body::Blocks(list), c)
            }
        };
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        match &body {
            Body::Stem { conv, bn, .. } => {
                params.extend(conv.params());
                params.extend(bn.params());
                buffers.extend(bn.buffers());
            }
            Body::Blocks(blocks) => blocks.iter().for_each(|b| b.tensors(&mut params, &mut buffers)),
        }
        (Self { index, body, params, buffers }, c_out)
    }

    pub fn forward<'g, F: Real>(&self, s: &Session<'g, '_, F>, x: Var<'g, F>) -> Var<'g, F> {
        match &self.body {
            Body::Stem { conv, bn, pool } => {
                let y = bn.forward(s, conv.forward(s, x)).relu();
                if *pool {
                    y.max_pool2d(3, 2, 1)
                } else {
                    y
                }
            }
            Body::Blocks(blocks) => blocks.iter().fold(x, |y, b| b.forward(s, y)),
        }
    }

    /// Learnable tensors of this stage, in a fixed order.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn buffers(&self) -> &[ParamId] {
        &self.buffers
    }
}
