//! Parameter containers and forward passes.
//!
//! Every container is generic over its leaf type: `ModelParams<Tensor>` holds
//! the stored values, `ModelParams<Var<'g>>` the same values placed on a graph.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tapegrad::nn::{gru_step_projected, l2_normalize, linear};
use tapegrad::{Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

macro_rules! param_tree {
    (@map leaf $v:expr, $name:expr, $f:ident) => { $f(&$name, $v)? };
    (@map $sub:ident $v:expr, $name:expr, $f:ident) => { $v.try_map_named(&$name, $f)? };

    (@visit leaf $v:expr, $name:expr, $f:ident) => { $f(&$name, $v) };
    (@visit $sub:ident $v:expr, $name:expr, $f:ident) => { $v.visit_named(&$name, $f) };

    (@visit_mut leaf $v:expr, $name:expr, $f:ident) => { $f(&$name, $v) };
    (@visit_mut $sub:ident $v:expr, $name:expr, $f:ident) => { $v.visit_named_mut(&$name, $f) };

    ($(#[$meta:meta])* $name:ident { $($field:ident : $ty:ty => $kind:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: $ty,)*
        }

        impl<T> $name<T> {
            /// Builds a tree of the same layout, calling `f(name, leaf)` in
            /// canonical order.
            pub fn try_map_named<U, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &T) -> std::result::Result<U, E>,
            ) -> std::result::Result<$name<U>, E> {
                Ok($name {
                    $($field: {
                        let name = join(prefix, stringify!($field));
                        param_tree!(@map $kind &self.$field, name, f)
                    },)*
                })
            }

            pub fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $({
                    let name = join(prefix, stringify!($field));
                    param_tree!(@visit $kind &self.$field, name, f);
                })*
            }

            pub fn visit_named_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
                $({
                    let name = join(prefix, stringify!($field));
                    param_tree!(@visit_mut $kind &mut self.$field, name, f);
                })*
            }

            pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> $name<U> {
                match self.try_map_named::<U, std::convert::Infallible>("", &mut |_, t| Ok(f(t))) {
                    Ok(v) => v,
                    Err(e) => match e {},
                }
            }

            /// `(name, leaf)` pairs in canonical order.
            pub fn leaves(&self) -> Vec<(String, &T)> {
                let mut out = Vec::new();
                self.visit_named("", &mut |n, t| out.push((n.to_string(), t)));
                out
            }

            pub fn leaves_mut(&mut self) -> Vec<&mut T> {
                let mut out = Vec::new();
                self.visit_named_mut("", &mut |_, t| out.push(t));
                out
            }

            /// Rebuilds a tree of this layout from leaves in canonical order.
            pub fn from_leaves<U>(&self, leaves: Vec<U>) -> Result<$name<U>> {
                let expected = self.leaves().len();
                if leaves.len() != expected {
                    return Err(Error::Dimension {
                        what: "parameter leaves",
                        expected,
                        got: leaves.len(),
                    });
                }
                let mut it = leaves.into_iter();
                self.try_map_named::<U, Error>("", &mut |_, _| {
                    it.next().ok_or_else(|| Error::Invalid("leaf iterator exhausted".into()))
                })
            }
        }
    };
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_string()
    } else {
        format!("{prefix}.{field}")
    }
}

param_tree!(
    /// Affine map `x @ weight + bias`; `weight: [in, out]`, `bias: [1, out]`.
    Linear { weight: T => leaf, bias: T => leaf }
);

param_tree!(
    /// GRU weights with gate columns ordered `(reset, update, candidate)`.
    Gru { w_ih: T => leaf, w_hh: T => leaf, b_ih: T => leaf, b_hh: T => leaf }
);

param_tree!(
    /// Two-layer MLP with the attention-gated residual `h + h * sigmoid(gate(h))`.
    Encoder {
        hidden: Linear<T> => tree,
        out: Linear<T> => tree,
        gate: Linear<T> => tree,
    }
);

param_tree!(MarginNet {
    forward: Gru<T> => tree,
    backward: Gru<T> => tree,
    out: Linear<T> => tree,
});

param_tree!(Mlp2 { l1: Linear<T> => tree, l2: Linear<T> => tree });

param_tree!(Mlp3 {
    l1: Linear<T> => tree,
    l2: Linear<T> => tree,
    l3: Linear<T> => tree,
});

param_tree!(
    /// Every trainable tensor of the system.
    ModelParams {
        encoder: Encoder<T> => tree,
        head: Linear<T> => tree,
        alpha: Linear<T> => tree,
        margin: MarginNet<T> => tree,
        discriminator: Mlp2<T> => tree,
        classifier: Linear<T> => tree,
        semantic: Mlp3<T> => tree,
        style: Mlp2<T> => tree,
    }
);

/// Named parameter groups, used to select what an optimizer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Head,
    Alpha,
    Margin,
    Discriminator,
    Classifier,
    Semantic,
    Style,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Encoder,
        Group::Head,
        Group::Alpha,
        Group::Margin,
        Group::Discriminator,
        Group::Classifier,
        Group::Semantic,
        Group::Style,
    ];

    pub fn of(leaf_name: &str) -> Option<Group> {
        let root = leaf_name.split('.').next()?;
        Some(match root {
            "encoder" => Group::Encoder,
            "head" => Group::Head,
            "alpha" => Group::Alpha,
            "margin" => Group::Margin,
            "discriminator" => Group::Discriminator,
            "classifier" => Group::Classifier,
            "semantic" => Group::Semantic,
            "style" => Group::Style,
            _ => return None,
        })
    }

    pub fn is_regularizer(&self) -> bool {
        matches!(
            self,
            Group::Discriminator | Group::Classifier | Group::Semantic | Group::Style
        )
    }
}

/// Layer widths of a concrete model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub embed: usize,
    pub disc_hidden: usize,
    pub margin_hidden: usize,
    pub classes: usize,
    pub semantic: usize,
    pub semantic_hidden: usize,
    pub style_hidden: usize,
    pub style: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &ModelConfig, input: usize, classes: usize, semantic: usize) -> Self {
        Self {
            input,
            hidden: cfg.hidden_dim,
            latent: cfg.latent_dim,
            embed: cfg.embed_dim,
            disc_hidden: cfg.disc_hidden,
            margin_hidden: cfg.margin_hidden,
            classes: classes.max(1),
            semantic: semantic.max(1),
            semantic_hidden: cfg.semantic_hidden,
            style_hidden: cfg.style_hidden,
            style: cfg.style_dim,
        }
    }

    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            input: 3,
            hidden: 4,
            latent: 2,
            embed: 2,
            disc_hidden: 2,
            margin_hidden: 1,
            classes: 2,
            semantic: 2,
            semantic_hidden: 2,
            style_hidden: 2,
            style: 2,
        }
    }
}

fn uniform(rng: &mut impl Rng, shape: [usize; 2], bound: f64) -> Tensor {
    let data = (0..shape[0] * shape[1])
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::new(shape, data).expect("shape and length agree")
}

impl Linear<Tensor> {
    /// `U(-1/sqrt(in), 1/sqrt(in))` for weight and bias.
    pub fn init(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform(rng, [input, output], bound),
            bias: uniform(rng, [1, output], bound),
        }
    }
}

impl Gru<Tensor> {
    pub fn init(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: uniform(rng, [input, 3 * hidden], bound),
            w_hh: uniform(rng, [hidden, 3 * hidden], bound),
            b_ih: uniform(rng, [1, 3 * hidden], bound),
            b_hh: uniform(rng, [1, 3 * hidden], bound),
        }
    }
}

impl ModelParams<Tensor> {
    /// Random initialization. Inner rates start at `alpha_init` everywhere and
    /// the margin output bias at `logit(initial_margin)`.
    pub fn init(
        dims: &ModelDims,
        rng: &mut impl Rng,
        alpha_init: f64,
        initial_margin: f64,
    ) -> Self {
        let encoder = Encoder {
            hidden: Linear::init(rng, dims.input, dims.hidden),
            out: Linear::init(rng, dims.hidden, dims.latent),
            gate: Linear::init(rng, dims.latent, dims.latent),
        };
        let head = Linear::init(rng, dims.latent, dims.embed);
        let alpha = head.map(|t| Tensor::full(t.shape(), alpha_init));
        let mut margin = MarginNet {
            forward: Gru::init(rng, 4 * dims.latent, dims.margin_hidden),
            backward: Gru::init(rng, 4 * dims.latent, dims.margin_hidden),
            out: Linear::init(rng, 2 * dims.margin_hidden, 1),
        };
        let m = initial_margin.clamp(1e-3, 1.0 - 1e-3);
        margin.out.bias = Tensor::scalar((m / (1.0 - m)).ln());
        Self {
            encoder,
            head,
            alpha,
            margin,
            discriminator: Mlp2 {
                l1: Linear::init(rng, dims.latent, dims.disc_hidden),
                l2: Linear::init(rng, dims.disc_hidden, 1),
            },
            classifier: Linear::init(rng, dims.latent, dims.classes),
            semantic: Mlp3 {
                l1: Linear::init(rng, dims.latent, dims.semantic_hidden),
                l2: Linear::init(rng, dims.semantic_hidden, dims.semantic_hidden),
                l3: Linear::init(rng, dims.semantic_hidden, dims.semantic),
            },
            style: Mlp2 {
                l1: Linear::init(rng, 2 * dims.latent, dims.style_hidden),
                l2: Linear::init(rng, dims.style_hidden, dims.style),
            },
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.encoder.hidden.weight.rows(),
            hidden: self.encoder.hidden.weight.cols(),
            latent: self.encoder.out.weight.cols(),
            embed: self.head.weight.cols(),
            disc_hidden: self.discriminator.l1.weight.cols(),
            margin_hidden: self.margin.forward.w_hh.rows(),
            classes: self.classifier.weight.cols(),
            semantic: self.semantic.l3.weight.cols(),
            semantic_hidden: self.semantic.l1.weight.cols(),
            style_hidden: self.style.l1.weight.cols(),
            style: self.style.l2.weight.cols(),
        }
    }

    /// Places every tensor on `g` as a differentiable leaf.
    pub fn to_graph<'g>(&self, g: &'g Graph) -> ModelParams<Var<'g>> {
        self.map(|t| g.param(t))
    }

    pub fn parameter_count(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }
}

impl<'g> Linear<Var<'g>> {
    pub fn forward(&self, x: Var<'g>) -> Result<Var<'g>> {
        Ok(linear(x, self.weight, self.bias)?)
    }

    pub fn values(&self) -> Linear<Tensor> {
        self.map(|v| (*v.value()).clone())
    }
}

impl<'g> Encoder<Var<'g>> {
    pub fn values(&self) -> Encoder<Tensor> {
        self.map(|v| (*v.value()).clone())
    }
}

/// Latent features `F(x)` for the rows of `x: [n, D_in]`.
pub fn encode<'g>(enc: &Encoder<Var<'g>>, x: Var<'g>) -> Result<Var<'g>> {
    let expected = enc.hidden.weight.shape()[0];
    if x.shape()[1] != expected {
        return Err(Error::Dimension {
            what: "encoder input",
            expected,
            got: x.shape()[1],
        });
    }
    let h = enc.hidden.forward(x)?.relu()?;
    let h = enc.out.forward(h)?;
    let gate = enc.gate.forward(h)?.sigmoid()?;
    Ok(h.add(h.mul(gate)?)?)
}

/// Unit-norm embeddings `M(latent)`.
pub fn project<'g>(head: &Linear<Var<'g>>, latent: Var<'g>) -> Result<Var<'g>> {
    Ok(l2_normalize(head.forward(latent)?)?)
}

/// `M(F(x))`.
pub fn embed<'g>(enc: &Encoder<Var<'g>>, head: &Linear<Var<'g>>, x: Var<'g>) -> Result<Var<'g>> {
    project(head, encode(enc, x)?)
}

#[derive(Debug, Clone, Copy)]
pub struct MarginPrediction<'g> {
    pub value: Var<'g>,
    /// True when the fixed margin was substituted because fewer than two
    /// pairs were available.
    pub fallback: bool,
}

/// Ordered pairs `(m, n)`, `m != n`, in lexicographic order.
pub fn relation_pairs(k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::with_capacity(k * k.saturating_sub(1));
    let mut right = Vec::with_capacity(left.capacity());
    for m in 0..k {
        for n in 0..k {
            if m != n {
                left.push(m);
                right.push(n);
            }
        }
    }
    (left, right)
}

/// Relation matrix `S_i` with one row `[f_m, f_n]` per ordered pair, where
/// `f_k = [F(sketch_k), F(photo_k)]`.
pub fn relation_matrix<'g>(sketch_latent: Var<'g>, photo_latent: Var<'g>) -> Result<Var<'g>> {
    let k = sketch_latent.shape()[0];
    let f = Var::concat_cols(&[sketch_latent, photo_latent])?;
    let (left, right) = relation_pairs(k);
    Ok(Var::concat_cols(&[
        f.gather_rows(&left)?,
        f.gather_rows(&right)?,
    ])?)
}

fn run_gru<'g>(gru: &Gru<Var<'g>>, seq: Var<'g>, reverse: bool) -> Result<Vec<Var<'g>>> {
    let steps = seq.shape()[0];
    let hidden = gru.w_hh.shape()[0];
    let xp = linear(seq, gru.w_ih, gru.b_ih)?;
    let g = seq.graph();
    let mut h = g.constant(Tensor::zeros([1, hidden]));
    let mut out = vec![h; steps];
    let order: Vec<usize> = if reverse {
        (0..steps).rev().collect()
    } else {
        (0..steps).collect()
    };
    for t in order {
        h = gru_step_projected(xp.slice(t..t + 1, 0..3 * hidden)?, h, gru.w_hh, gru.b_hh)?;
        out[t] = h;
    }
    Ok(out)
}

/// `R(S)`: bidirectional GRU over the rows of `s`, max-pool over time,
/// linear, sigmoid. Returns a `[1, 1]` value in `(0, 1)`.
pub fn margin_from_relations<'g>(net: &MarginNet<Var<'g>>, s: Var<'g>) -> Result<Var<'g>> {
    let fwd = run_gru(&net.forward, s, false)?;
    let bwd = run_gru(&net.backward, s, true)?;
    let fwd = Var::concat_rows(&fwd)?;
    let bwd = Var::concat_rows(&bwd)?;
    let pooled = Var::concat_cols(&[fwd, bwd])?.max_rows()?;
    Ok(net.out.forward(pooled)?.sigmoid()?)
}

/// Per-task margin from the latents of the support pairs (row `k` of each
/// matrix belongs to pair `k`). With fewer than two pairs no relation can be
/// formed and `fixed` is returned with a warning on the graph.
pub fn predict_margin<'g>(
    net: &MarginNet<Var<'g>>,
    sketch_latent: Var<'g>,
    photo_latent: Var<'g>,
    fixed: f64,
) -> Result<MarginPrediction<'g>> {
    let g = sketch_latent.graph();
    if sketch_latent.shape() != photo_latent.shape() {
        return Err(Error::Dimension {
            what: "margin net pairs",
            expected: sketch_latent.shape()[0],
            got: photo_latent.shape()[0],
        });
    }
    if sketch_latent.shape()[0] < 2 {
        g.warn(format!(
            "predict_margin: {} pair(s), using fixed margin {fixed}",
            sketch_latent.shape()[0]
        ));
        return Ok(MarginPrediction {
            value: g.scalar(fixed),
            fallback: true,
        });
    }
    let s = relation_matrix(sketch_latent, photo_latent)?;
    Ok(MarginPrediction {
        value: margin_from_relations(net, s)?,
        fallback: false,
    })
}

/// Domain probability `D(GRL(latent))`: `[n, 1]`, 1 meaning photo.
pub fn discriminate<'g>(disc: &Mlp2<Var<'g>>, latent: Var<'g>, grl_lambda: f64) -> Result<Var<'g>> {
    let x = latent.grad_reverse(grl_lambda)?;
    let h = disc.l1.forward(x)?.relu()?;
    Ok(disc.l2.forward(h)?.sigmoid()?)
}

pub fn classify<'g>(cls: &Linear<Var<'g>>, latent: Var<'g>) -> Result<Var<'g>> {
    cls.forward(latent)
}

pub fn decode_semantic<'g>(dec: &Mlp3<Var<'g>>, latent: Var<'g>) -> Result<Var<'g>> {
    let h = dec.l1.forward(latent)?.relu()?;
    let h = dec.l2.forward(h)?.relu()?;
    dec.l3.forward(h)
}

/// `T([F(sketch), F(photo)])`.
pub fn style_embed<'g>(
    style: &Mlp2<Var<'g>>,
    sketch_latent: Var<'g>,
    photo_latent: Var<'g>,
) -> Result<Var<'g>> {
    let x = Var::concat_cols(&[sketch_latent, photo_latent])?;
    let h = style.l1.forward(x)?.relu()?;
    style.l2.forward(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lin(w: &[&[f64]], b: &[f64]) -> Linear<Tensor> {
        Linear {
            weight: Tensor::from_rows(w).unwrap(),
            bias: Tensor::row(b),
        }
    }

    #[test]
    fn leaf_names_are_canonical() {
        let p = ModelParams::init(
            &ModelDims::tiny(),
            &mut ChaCha8Rng::seed_from_u64(0),
            0.01,
            0.3,
        );
        let names: Vec<String> = p.leaves().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "encoder.hidden.weight");
        assert!(names.contains(&"margin.backward.b_hh".to_string()));
        assert_eq!(names.last().unwrap(), "style.l2.bias");
        assert!(names.iter().all(|n| Group::of(n).is_some()));
        assert!(p.parameter_count() <= 200, "{}", p.parameter_count());
    }

    #[test]
    fn from_leaves_round_trips() {
        let p = ModelParams::init(
            &ModelDims::tiny(),
            &mut ChaCha8Rng::seed_from_u64(1),
            0.01,
            0.3,
        );
        let flat: Vec<Tensor> = p.leaves().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(p.from_leaves(flat).unwrap(), p);
        assert!(p.from_leaves(vec![Tensor::scalar(0.0)]).is_err());
    }

    #[test]
    fn dims_are_recovered() {
        let d = ModelDims::tiny();
        let p = ModelParams::init(&d, &mut ChaCha8Rng::seed_from_u64(2), 0.01, 0.3);
        assert_eq!(p.dims(), d);
    }

    #[test]
    fn zero_encoder_gives_zero_latent() {
        let d = ModelDims::tiny();
        let p = ModelParams::init(&d, &mut ChaCha8Rng::seed_from_u64(3), 0.01, 0.3);
        let zero = p.encoder.map(|t| Tensor::zeros(t.shape()));
        let g = Graph::new();
        let enc = zero.map(|t| g.param(t));
        let x = g.constant(Tensor::row(&[1.0, -2.0, 3.0]));
        let z = encode(&enc, x).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_two_by_two_encoder() {
        // hidden: relu([x0 - x1, x0 + x1] + [0, -1]), out: identity, gate: zero => sigmoid 0.5
        let enc = Encoder {
            hidden: lin(&[&[1.0, 1.0], &[-1.0, 1.0]], &[0.0, -1.0]),
            out: lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]),
            gate: lin(&[&[0.0, 0.0], &[0.0, 0.0]], &[0.0, 0.0]),
        };
        let g = Graph::new();
        let enc = enc.map(|t| g.param(t));
        let x = g.constant(Tensor::row(&[2.0, 0.5]));
        let z = encode(&enc, x).unwrap().value();
        // h = relu([1.5, 1.5]) = [1.5, 1.5]; latent = 1.5 * 1.5
        assert_eq!(z.data(), &[2.25, 2.25]);
    }

    #[test]
    fn saturated_negative_gate_leaves_mlp_output() {
        let enc = Encoder {
            hidden: lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0]),
            out: lin(&[&[2.0, 0.0], &[0.0, 3.0]], &[0.0, 0.0]),
            gate: lin(&[&[0.0, 0.0], &[0.0, 0.0]], &[-50.0, -50.0]),
        };
        let g = Graph::new();
        let enc = enc.map(|t| g.param(t));
        let z = encode(&enc, g.constant(Tensor::row(&[1.0, 1.0])))
            .unwrap()
            .value();
        assert!((z.data()[0] - 2.0).abs() < 1e-12);
        assert!((z.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_rejects_wrong_width() {
        let p = ModelParams::init(
            &ModelDims::tiny(),
            &mut ChaCha8Rng::seed_from_u64(4),
            0.01,
            0.3,
        );
        let g = Graph::new();
        let m = p.to_graph(&g);
        let err = encode(&m.encoder, g.constant(Tensor::row(&[1.0, 2.0]))).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                expected: 3,
                got: 2,
                ..
            }
        ));
    }

    #[test]
    fn relation_matrix_has_k_times_k_minus_one_rows() {
        let g = Graph::new();
        let sk = g.constant(Tensor::new([5, 3], (0..15).map(f64::from).collect()).unwrap());
        let ph = g.constant(Tensor::new([5, 3], (15..30).map(f64::from).collect()).unwrap());
        let s = relation_matrix(sk, ph).unwrap().value();
        assert_eq!(s.shape(), [20, 12]);
        // first row is pair (0, 1): [sketch0, photo0, sketch1, photo1]
        assert_eq!(
            s.row_slice(0),
            &[0.0, 1.0, 2.0, 15.0, 16.0, 17.0, 3.0, 4.0, 5.0, 18.0, 19.0, 20.0]
        );
        // last row is pair (4, 3)
        assert_eq!(&s.row_slice(19)[..3], &[12.0, 13.0, 14.0]);
    }

    #[test]
    fn single_row_gru_margin_by_hand() {
        // one-dimensional relation rows, hidden size 1, all GRU weights w
        let w = 0.5;
        let gru = Gru {
            w_ih: Tensor::full([1, 3], w),
            w_hh: Tensor::full([1, 3], w),
            b_ih: Tensor::zeros([1, 3]),
            b_hh: Tensor::zeros([1, 3]),
        };
        let net = MarginNet {
            forward: gru.clone(),
            backward: gru,
            out: lin(&[&[1.0], &[-2.0]], &[0.1]),
        };
        let g = Graph::new();
        let net = net.map(|t| g.param(t));
        let s = g.constant(Tensor::row(&[1.0]));
        let mu = margin_from_relations(&net, s).unwrap().item();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let h = (1.0 - sig(w)) * (w).tanh();
        let expected = sig(h - 2.0 * h + 0.1);
        assert!((mu - expected).abs() < 1e-15, "{mu} vs {expected}");
    }

    #[test]
    fn margin_is_in_unit_interval_and_deterministic() {
        let d = ModelDims {
            latent: 4,
            margin_hidden: 3,
            ..ModelDims::tiny()
        };
        let p = ModelParams::init(&d, &mut ChaCha8Rng::seed_from_u64(5), 0.01, 0.3);
        let run = || {
            let g = Graph::new();
            let m = p.to_graph(&g);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let sk = g.constant(uniform(&mut rng, [5, 4], 3.0));
            let ph = g.constant(uniform(&mut rng, [5, 4], 3.0));
            let mu = predict_margin(&m.margin, sk, ph, 0.3).unwrap();
            assert!(!mu.fallback);
            mu.value.item()
        };
        let a = run();
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(a.to_bits(), run().to_bits());
    }

    #[test]
    fn single_pair_falls_back_with_warning() {
        let p = ModelParams::init(
            &ModelDims::tiny(),
            &mut ChaCha8Rng::seed_from_u64(6),
            0.01,
            0.3,
        );
        let g = Graph::new();
        let m = p.to_graph(&g);
        let one = g.constant(Tensor::row(&[0.1, 0.2]));
        let mu = predict_margin(&m.margin, one, one, 0.3).unwrap();
        assert!(mu.fallback);
        assert_eq!(mu.value.item(), 0.3);
        assert!(!g.warnings().is_empty());
    }

    #[test]
    fn fresh_margin_starts_near_initial_value() {
        let p = ModelParams::init(
            &ModelDims::tiny(),
            &mut ChaCha8Rng::seed_from_u64(7),
            0.01,
            0.3,
        );
        let b = p.margin.out.bias.item();
        assert!((1.0 / (1.0 + (-b).exp()) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_heads_give_zero_outputs() {
        let p = ModelParams::init(
            &ModelDims::tiny(),
            &mut ChaCha8Rng::seed_from_u64(8),
            0.01,
            0.3,
        );
        let zero = p.map(|t| Tensor::zeros(t.shape()));
        let g = Graph::new();
        let m = zero.to_graph(&g);
        let lat = g.constant(Tensor::row(&[0.4, -0.9]));
        assert!(classify(&m.classifier, lat)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(decode_semantic(&m.semantic, lat)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(style_embed(&m.style, lat, lat)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            discriminate(&m.discriminator, lat, 1.0).unwrap().item(),
            0.5
        );
    }

    #[test]
    fn hand_set_classifier_and_style_head() {
        let g = Graph::new();
        let cls = lin(&[&[1.0, 0.0, 2.0], &[0.0, -1.0, 1.0]], &[0.5, 0.0, 0.0]).map(|t| g.param(t));
        let lat = g.constant(Tensor::row(&[2.0, 3.0]));
        assert_eq!(
            classify(&cls, lat).unwrap().value().data(),
            &[2.5, -3.0, 7.0]
        );

        // style: concat [s, p] = [1, 2, 3, 4]; l1 sums pairs, l2 doubles
        let style = Mlp2 {
            l1: lin(
                &[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[0.0, -1.0]],
                &[0.0, 0.0],
            ),
            l2: lin(&[&[2.0], &[2.0]], &[0.0]),
        }
        .map(|t| g.param(t));
        let s = g.constant(Tensor::row(&[1.0, 2.0]));
        let p = g.constant(Tensor::row(&[3.0, 4.0]));
        // l1 = relu([3, -1]) = [3, 0]; l2 = 6
        assert_eq!(style_embed(&style, s, p).unwrap().item(), 6.0);
        // swapping the order changes the input: l1 = relu([7, 1 - 2]) = [7, 0]
        assert_eq!(style_embed(&style, p, s).unwrap().item(), 14.0);
    }

    #[test]
    fn hand_set_semantic_decoder() {
        let g = Graph::new();
        let dec = Mlp3 {
            l1: lin(&[&[1.0, -1.0]], &[0.0, 0.0]),
            l2: lin(&[&[1.0, 0.0], &[0.0, 1.0]], &[1.0, 0.0]),
            l3: lin(&[&[1.0], &[1.0]], &[-0.5]),
        }
        .map(|t| g.param(t));
        // x = 2: l1 = relu([2, -2]) = [2, 0]; l2 = relu([3, 0]); l3 = 3 - 0.5
        let out = decode_semantic(&dec, g.constant(Tensor::row(&[2.0])))
            .unwrap()
            .item();
        assert_eq!(out, 2.5);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let d = ModelDims::tiny();
        let p = ModelParams::init(&d, &mut ChaCha8Rng::seed_from_u64(10), 0.01, 0.3);
        let g = Graph::new();
        let m = p.to_graph(&g);
        let x = g.constant(Tensor::from_rows(&[[0.3, 0.1, -0.7], [0.3, 0.1, -0.7]]).unwrap());
        let e = embed(&m.encoder, &m.head, x).unwrap().value();
        for r in 0..2 {
            let n: f64 = e.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(e.row_slice(0), e.row_slice(1));
    }
}
