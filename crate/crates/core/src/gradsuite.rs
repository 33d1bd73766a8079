//! Seeded finite-difference checks over every differentiable tape operation,
//! the transformer blocks, the adapter and the full fused VQA loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::tokenizer::{EOS, PAD};
use crate::data::{tokenize, GrayImage};
use crate::error::Result;
use crate::lora::LoraConfig;
use crate::model::{LmConfig, VisionConfig, VlmModel, VqaSample};
use crate::nn::{Activation, BlockConfig, LinearMap, TransformerBlock};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, NormKind, Tape, Tensor, Var, DEFAULT_STEP};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub report: GradCheckReport,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output coordinate carries a
/// distinct weight into the scalar.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    tape.sum(p)
}

struct Suite {
    rng: ChaCha8Rng,
    out: Vec<ComponentCheck>,
}

impl Suite {
    fn rand(&mut self, shape: &[usize]) -> Tensor {
        uniform(&mut self.rng, shape, -1.0, 1.0)
    }

    fn push(&mut self, component: &'static str, report: GradCheckReport) {
        match self.out.iter_mut().find(|c| c.component == component) {
            Some(c) => c.report.merge(report),
            None => self.out.push(ComponentCheck { component, report }),
        }
    }

    /// Checks `op(x)` projected to a scalar, over every coordinate of `x`.
    fn unary(
        &mut self,
        component: &'static str,
        x: Tensor,
        out_shape: &[usize],
        op: impl Fn(&mut Tape, Var) -> Result<Var>,
    ) -> Result<()> {
        let r = self.rand(out_shape);
        let report = grad_check(
            |t, x| {
                let y = op(t, x)?;
                project(t, y, &r)
            },
            &x,
            DEFAULT_STEP,
        )?;
        self.push(component, report);
        Ok(())
    }

    /// Checks a binary op with respect to each operand in turn.
    fn binary(
        &mut self,
        component: &'static str,
        a: Tensor,
        b: Tensor,
        out_shape: &[usize],
        op: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
    ) -> Result<()> {
        let (a2, b2) = (a.clone(), b.clone());
        self.unary(component, a, out_shape, |t, x| {
            let bv = t.constant(b2.clone());
            op(t, x, bv)
        })?;
        self.unary(component, b, out_shape, |t, x| {
            let av = t.constant(a2.clone());
            op(t, av, x)
        })
    }
}

fn tiny_block(norm_kind: NormKind, activation: Activation, causal: bool) -> BlockConfig {
    BlockConfig {
        embed_dim: 8,
        num_heads: 2,
        ff_multiplier: 2,
        causal,
        norm_kind,
        activation,
    }
}

fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, amp: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

/// Up to `per_tensor` coordinates of every tensor in `store`. Key biases are
/// skipped: they shift every score of a query row equally, so their true
/// gradient is identically zero and the finite difference is pure roundoff.
fn sample_targets(store: &ParamStore, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(String, Vec<usize>)> {
    store
        .iter()
        .filter(|(name, _)| !name.ends_with("attn.k.bias"))
        .map(|(name, t)| {
            let n = t.numel();
            let coords = if n <= per_tensor {
                (0..n).collect()
            } else {
                (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
            };
            (name.to_string(), coords)
        })
        .collect()
}

fn block_check(suite: &mut Suite, component: &'static str, cfg: BlockConfig, seed: u64) -> Result<()> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(seed);
    let block = TransformerBlock::init(&mut store, &mut init, "b", &cfg)?;
    perturb(&mut store, &mut suite.rng, 0.3);
    let x = suite.rand(&[5, cfg.embed_dim]);
    let r = suite.rand(&[5, cfg.embed_dim]);
    let targets = sample_targets(&store, 6, &mut suite.rng);
    let report = grad_check_params(&store, &targets, DEFAULT_STEP, |t, s| {
        let xv = t.constant(x.clone());
        let y = block.forward(t, s, xv)?;
        project(t, y, &r)
    })?;
    suite.push(component, report);
    let report = grad_check(
        |t, xv| {
            let y = block.forward(t, &store, xv)?;
            project(t, y, &r)
        },
        &x,
        DEFAULT_STEP,
    )?;
    suite.push(component, report);
    Ok(())
}

/// Smallest model shape that exercises every code path of the fused loss.
pub fn tiny_model_configs() -> (VisionConfig, LmConfig) {
    (
        VisionConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            ..Default::default()
        },
        LmConfig {
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            context_len: 32,
            ..Default::default()
        },
    )
}

fn fused_loss_check(suite: &mut Suite, seed: u64) -> Result<()> {
    let (vc, lc) = tiny_model_configs();
    let mut model = VlmModel::new(vc, lc, seed)?;
    model.attach_lora(&LoraConfig {
        rank: 2,
        alpha: 4.0,
        ..Default::default()
    })?;
    perturb(&mut model.params, &mut suite.rng, 0.3);
    let images: Vec<GrayImage> = (0..2)
        .map(|_| GrayImage::new(8, 8, uniform(&mut suite.rng, &[64], 0.0, 1.0).into_data()))
        .collect::<Result<_>>()?;
    let questions = [tokenize("Is it?"), tokenize("What?")];
    let answers = [
        vec![b'n' as usize, b'o' as usize, EOS],
        vec![b'x' as usize, EOS, PAD, PAD],
    ];
    let targets = sample_targets(&model.params, 3, &mut suite.rng);
    let report = grad_check_params(&model.params, &targets, DEFAULT_STEP, |t, store| {
        let mut m = model.clone();
        m.params = store.clone();
        let mut total: Option<Var> = None;
        for i in 0..2 {
            let s = VqaSample {
                image: Some(&images[i]),
                question_ids: &questions[i],
                answer_ids: &answers[i],
            };
            let (l, _) = m.sample_loss(t, &s)?;
            total = Some(match total {
                Some(acc) => t.add(acc, l)?,
                None => l,
            });
        }
        t.scale(total.expect("two samples"), 0.5)
    })?;
    suite.push("fused_vqa_loss", report);
    Ok(())
}

/// Runs every check for one seed. Components appear in a fixed order.
pub fn gradient_suite(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: Vec::new(),
    };
    let (a, b) = (s.rand(&[3, 4]), s.rand(&[4, 5]));
    s.binary("matmul", a, b, &[3, 5], |t, a, b| t.matmul(a, b))?;
    let (a, b) = (s.rand(&[3, 4]), s.rand(&[5, 4]));
    s.binary("matmul_nt", a, b, &[3, 5], |t, a, b| t.matmul_nt(a, b))?;
    let x = s.rand(&[3, 4]);
    s.unary("transpose", x, &[4, 3], |t, x| t.transpose(x))?;
    let (x, w, bias) = (s.rand(&[3, 4]), s.rand(&[5, 4]), s.rand(&[5]));
    {
        let (w2, b2, x2) = (w.clone(), bias.clone(), x.clone());
        s.binary("linear", x.clone(), w.clone(), &[3, 5], |t, x, w| {
            let b = t.constant(b2.clone());
            t.linear(x, w, Some(b))
        })?;
        s.unary("linear", bias, &[3, 5], |t, b| {
            let x = t.constant(x2.clone());
            let w = t.constant(w2.clone());
            t.linear(x, w, Some(b))
        })?;
    }
    let (a, b) = (s.rand(&[3, 4]), s.rand(&[3, 4]));
    s.binary("add", a.clone(), b.clone(), &[3, 4], |t, a, b| t.add(a, b))?;
    s.binary("sub", a.clone(), b.clone(), &[3, 4], |t, a, b| t.sub(a, b))?;
    s.binary("mul", a.clone(), b, &[3, 4], |t, a, b| t.mul(a, b))?;
    s.unary("add_const", a.clone(), &[3, 4], |t, x| t.add_const(x, 0.7))?;
    s.unary("scale", a, &[3, 4], |t, x| t.scale(x, -1.3))?;
    let x = uniform(&mut s.rng, &[3, 5], -3.0, 3.0);
    s.unary("softmax", x, &[3, 5], |t, x| t.softmax(x))?;
    let x = uniform(&mut s.rng, &[4, 4], -3.0, 3.0);
    s.unary("causal_softmax", x, &[4, 4], |t, x| t.causal_softmax(x))?;
    let x = uniform(&mut s.rng, &[3, 4], -3.0, 3.0);
    s.unary("gelu", x.clone(), &[3, 4], |t, x| t.gelu(x))?;
    s.unary("silu", x, &[3, 4], |t, x| t.silu(x))?;

    let (x, g, bias) = (s.rand(&[3, 6]), s.rand(&[6]), s.rand(&[6]));
    {
        let (g2, b2) = (g.clone(), bias.clone());
        s.unary("layer_norm", x.clone(), &[3, 6], |t, x| {
            let g = t.constant(g2.clone());
            let b = t.constant(b2.clone());
            t.layer_norm(x, g, Some(b))
        })?;
        let (x2, b2) = (x.clone(), bias.clone());
        s.unary("layer_norm", g.clone(), &[3, 6], |t, g| {
            let x = t.constant(x2.clone());
            let b = t.constant(b2.clone());
            t.layer_norm(x, g, Some(b))
        })?;
        let (x2, g2) = (x.clone(), g.clone());
        s.unary("layer_norm", bias, &[3, 6], |t, b| {
            let x = t.constant(x2.clone());
            let g = t.constant(g2.clone());
            t.layer_norm(x, g, Some(b))
        })?;
        s.binary("rms_norm", x, g, &[3, 6], |t, x, g| t.rms_norm(x, g))?;
    }

    let table = s.rand(&[6, 3]);
    s.unary("embedding", table, &[4, 3], |t, tb| t.embedding(tb, &[2, 0, 2, 5]))?;
    let logits = uniform(&mut s.rng, &[4, 6], -2.0, 2.0);
    let report = grad_check(
        |t, l| t.cross_entropy(l, &[1, 5, 0, 3], &[true, false, true, true]),
        &logits,
        DEFAULT_STEP,
    )?;
    s.push("cross_entropy", report);
    let x = s.rand(&[3, 4]);
    s.unary("sum", x.clone(), &[1], |t, x| t.sum(x))?;
    s.unary("reshape", x.clone(), &[2, 6], |t, x| t.reshape(x, &[2, 6]))?;
    s.unary("slice_cols", x.clone(), &[3, 2], |t, x| t.slice_cols(x, 1, 2))?;
    s.unary("slice_rows", x.clone(), &[2, 4], |t, x| t.slice_rows(x, 1, 2))?;
    s.unary("mean_rows", x.clone(), &[1, 4], |t, x| t.mean_rows(x))?;
    let y = s.rand(&[3, 2]);
    s.binary("concat_cols", x.clone(), y, &[3, 6], |t, a, b| t.concat_cols(&[a, b]))?;
    let y = s.rand(&[2, 4]);
    s.binary("concat_rows", x, y, &[5, 4], |t, a, b| t.concat_rows(&[a, b]))?;

    {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let mut map = LinearMap::init(&mut store, &mut init, "m", 6, 5, true)?;
        crate::lora::attach(
            [&mut map],
            &mut store,
            &LoraConfig {
                rank: 2,
                alpha: 4.0,
                target_selectors: vec!["m".into()],
            },
            &mut init,
        )?;
        perturb(&mut store, &mut s.rng, 0.5);
        let x = s.rand(&[3, 6]);
        let r = s.rand(&[3, 5]);
        let targets = sample_targets(&store, 64, &mut s.rng);
        let report = grad_check_params(&store, &targets, DEFAULT_STEP, |t, st| {
            let xv = t.constant(x.clone());
            let y = map.forward(t, st, xv)?;
            project(t, y, &r)
        })?;
        s.push("lora_linear", report);
    }

    block_check(
        &mut s,
        "encoder_block",
        tiny_block(NormKind::LayerNorm, Activation::Gelu, false),
        seed,
    )?;
    block_check(
        &mut s,
        "decoder_block",
        tiny_block(NormKind::RmsNorm, Activation::Silu, true),
        seed,
    )?;
    fused_loss_check(&mut s, seed)?;
    Ok(s.out)
}
