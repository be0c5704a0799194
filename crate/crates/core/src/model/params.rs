//! Hyperparameters, the flat parameter buffer and its named layout.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::stream_rng;

/// How the video condition enters the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// Per-step channel concatenation of audio and aligned visual embeddings.
    Fusion,
    /// Visual rows placed in front of the audio rows (baseline).
    Prepend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Codebook entries per level; the padding id is `k`.
    pub k: usize,
    pub n_q: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub d_raw: usize,
    /// Hidden width of the visual projection MLP.
    pub d_vis_hidden: usize,
    pub n_layer: usize,
    pub n_head: usize,
    /// Gated feed-forward width; 0 means `8d/3` rounded up to a multiple of 16.
    pub ffn_hidden: usize,
    pub conditioning: Conditioning,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 256,
            n_q: 4,
            d_a: 128,
            d_v: 64,
            d_raw: 16,
            d_vis_hidden: 64,
            n_layer: 4,
            n_head: 4,
            ffn_hidden: 0,
            conditioning: Conditioning::Fusion,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.d_a + self.d_v
    }

    pub fn vocab(&self) -> usize {
        self.k + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d() / self.n_head
    }

    pub fn ffn(&self) -> usize {
        if self.ffn_hidden > 0 {
            self.ffn_hidden
        } else {
            (8 * self.d()).div_ceil(3).div_ceil(16) * 16
        }
    }

    /// Copy with the feed-forward width made explicit.
    pub fn resolved(&self) -> ModelConfig {
        ModelConfig {
            ffn_hidden: self.ffn(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k >= u16::MAX as usize {
            return Err(Error::invalid("k must be in [2, 65534]"));
        }
        if self.n_q == 0 || self.n_layer == 0 || self.n_head == 0 {
            return Err(Error::invalid("n_q, n_layer and n_head must be positive"));
        }
        if self.d_a == 0 || self.d_v == 0 || self.d_raw == 0 || self.d_vis_hidden == 0 {
            return Err(Error::invalid("all widths must be positive"));
        }
        if self.d() % (2 * self.n_head) != 0 {
            return Err(Error::invalid(format!(
                "width {} is not divisible by 2 * n_head = {}",
                self.d(),
                2 * self.n_head
            )));
        }
        Ok(())
    }
}

/// Parameter groups, used for gradient-check coverage and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Embedding,
    VisualProjection,
    Condition,
    Attention,
    FeedForward,
    Norm,
    Head,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Embedding,
        Family::VisualProjection,
        Family::Condition,
        Family::Attention,
        Family::FeedForward,
        Family::Norm,
        Family::Head,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn range(self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub family: Family,
    pub shape: Vec<usize>,
    pub span: Span,
    /// Decoupled weight decay applies to this tensor.
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpans {
    pub attn_norm: Span,
    pub wq: Span,
    pub wk: Span,
    pub wv: Span,
    pub wo: Span,
    pub ffn_norm: Span,
    pub w_gate: Span,
    pub w_up: Span,
    pub w_down: Span,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub embed: Vec<Span>,
    pub vis_w1: Span,
    pub vis_b1: Span,
    pub vis_w2: Span,
    pub vis_b2: Span,
    pub u_cond: Span,
    pub v_pad: Span,
    pub blocks: Vec<BlockSpans>,
    pub final_norm: Span,
    pub head_w: Vec<Span>,
    pub head_b: Vec<Span>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl Builder {
    fn add(&mut self, name: String, family: Family, shape: &[usize], decay: bool) -> Span {
        let len = shape.iter().product();
        let span = Span {
            offset: self.total,
            len,
        };
        self.total += len;
        self.tensors.push(TensorInfo {
            name,
            family,
            shape: shape.to_vec(),
            span,
            decay,
        });
        span
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d();
        let f = cfg.ffn();
        let v = cfg.vocab();
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
        };
        let embed = (0..cfg.n_q)
            .map(|i| b.add(format!("embed.{i}"), Family::Embedding, &[v, cfg.d_a], false))
            .collect();
        let vis_w1 = b.add("visual.w1".into(), Family::VisualProjection, &[cfg.d_vis_hidden, cfg.d_raw], true);
        let vis_b1 = b.add("visual.b1".into(), Family::VisualProjection, &[cfg.d_vis_hidden], false);
        let vis_w2 = b.add("visual.w2".into(), Family::VisualProjection, &[cfg.d_v, cfg.d_vis_hidden], true);
        let vis_b2 = b.add("visual.b2".into(), Family::VisualProjection, &[cfg.d_v], false);
        let u_cond = b.add("u_cond".into(), Family::Condition, &[cfg.d_v], false);
        let v_pad = b.add("v_pad".into(), Family::Condition, &[cfg.d_v], false);
        let blocks = (0..cfg.n_layer)
            .map(|l| BlockSpans {
                attn_norm: b.add(format!("blocks.{l}.attn_norm"), Family::Norm, &[d], false),
                wq: b.add(format!("blocks.{l}.wq"), Family::Attention, &[d, d], true),
                wk: b.add(format!("blocks.{l}.wk"), Family::Attention, &[d, d], true),
                wv: b.add(format!("blocks.{l}.wv"), Family::Attention, &[d, d], true),
                wo: b.add(format!("blocks.{l}.wo"), Family::Attention, &[d, d], true),
                ffn_norm: b.add(format!("blocks.{l}.ffn_norm"), Family::Norm, &[d], false),
                w_gate: b.add(format!("blocks.{l}.w_gate"), Family::FeedForward, &[f, d], true),
                w_up: b.add(format!("blocks.{l}.w_up"), Family::FeedForward, &[f, d], true),
                w_down: b.add(format!("blocks.{l}.w_down"), Family::FeedForward, &[d, f], true),
            })
            .collect();
        let final_norm = b.add("final_norm".into(), Family::Norm, &[d], false);
        let mut head_w = Vec::new();
        let mut head_b = Vec::new();
        for i in 0..cfg.n_q {
            head_w.push(b.add(format!("head.{i}.w"), Family::Head, &[v, d], true));
            head_b.push(b.add(format!("head.{i}.b"), Family::Head, &[v], false));
        }
        Layout {
            tensors: b.tensors,
            embed,
            vis_w1,
            vis_b1,
            vis_w2,
            vis_b2,
            u_cond,
            v_pad,
            blocks,
            final_norm,
            head_w,
            head_b,
            total: b.total,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Total trainable scalars for a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d();
    let f = cfg.ffn();
    let v = cfg.vocab();
    let embed = cfg.n_q * v * cfg.d_a;
    let visual = cfg.d_vis_hidden * cfg.d_raw + cfg.d_vis_hidden + cfg.d_v * cfg.d_vis_hidden + cfg.d_v;
    let cond = 2 * cfg.d_v;
    let block = 2 * d + 4 * d * d + 3 * d * f;
    let heads = cfg.n_q * (v * d + v);
    embed + visual + cond + cfg.n_layer * block + d + heads
}

/// All trainable values in one buffer, addressed through [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub data: Vec<T>,
}

impl<T: Real> Params<T> {
    #[inline]
    pub fn get(&self, span: Span) -> &[T] {
        &self.data[span.range()]
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn convert<U: Real>(&self) -> Params<U> {
        Params {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn from_data(cfg: ModelConfig, data: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.resolved();
        let layout = Layout::new(&cfg);
        if data.len() != layout.total {
            return Err(Error::invalid(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Params { cfg, layout, data })
    }
}

impl Params<f32> {
    /// Seeded initialization. Linear maps use `1/sqrt(fan_in)` scaling, the
    /// residual output projections are further shrunk by `1/sqrt(2 n_layer)`
    /// and the heads start near zero so initial predictions are near uniform.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = &cfg.resolved();
        let layout = Layout::new(cfg);
        let mut data = vec![0.0f32; layout.total];
        let mut rng = stream_rng(seed, 17);
        let residual_scale = 1.0 / (2.0 * cfg.n_layer as f64).sqrt();
        for t in &layout.tensors {
            let out = &mut data[t.span.range()];
            let name = t.name.as_str();
            let std = if name.ends_with("norm") {
                out.fill(1.0);
                continue;
            } else if t.shape.len() == 1 && t.family != Family::Condition {
                continue; // biases
            } else if t.family == Family::Embedding || t.family == Family::Condition {
                0.5
            } else if t.family == Family::Head {
                0.02
            } else {
                let fan_in = t.shape[1] as f64;
                let base = 1.0 / fan_in.sqrt();
                if name.ends_with("wo") || name.ends_with("w_down") {
                    base * residual_scale
                } else {
                    base
                }
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for v in out.iter_mut() {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        Ok(Params {
            cfg: cfg.clone(),
            layout,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_layout() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                k: 16,
                n_q: 2,
                d_a: 12,
                d_v: 4,
                n_layer: 1,
                n_head: 2,
                ..ModelConfig::default()
            },
        ] {
            assert_eq!(Layout::new(&cfg).total, parameter_count(&cfg));
        }
    }

    #[test]
    fn ffn_width_rounds_to_sixteen() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.ffn(), 512);
        let small = ModelConfig {
            d_a: 32,
            d_v: 16,
            ..cfg
        };
        assert_eq!(small.ffn(), 128);
    }

    #[test]
    fn rejects_odd_head_width() {
        let cfg = ModelConfig {
            d_a: 10,
            d_v: 5,
            n_head: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig {
            k: 8,
            n_q: 2,
            d_a: 8,
            d_v: 8,
            n_layer: 1,
            n_head: 2,
            ..ModelConfig::default()
        };
        assert_eq!(Params::init(&cfg, 5).unwrap(), Params::init(&cfg, 5).unwrap());
        assert_ne!(Params::init(&cfg, 5).unwrap().data, Params::init(&cfg, 6).unwrap().data);
    }
}
