//! Finite-difference checks over every differentiable building block, from
//! single attention heads up to the gate and the joint training loss.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diff::gradcheck::{check_inputs, check_params, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::diff::loss::{cross_entropy_graph, kl_divergence_graph};
use crate::diff::nn::{self, ParamView};
use crate::diff::{Graph, Mat, ParameterSet, Var};
use crate::error::Result;
use crate::gate::{Gate, GateConfig};
use crate::moe::{diversity_graph, similarity_graph, Similarity};
use crate::rng::{chacha, derive_seed};
use crate::synth::generate_classification_set;
use crate::walk::extract_walks;

/// Parameter coordinates perturbed per parameter check.
const PARAM_COORDS: usize = 120;

fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Mat { rows, cols, data }
}

/// `sum(x ⊙ w)` for a fixed random `w`, so every output coordinate reaches
/// the scalar with its own weight.
fn project(g: &mut Graph, x: Var, w: &Mat) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn weights_like(g: &Graph, x: Var, seed: u64) -> Mat {
    let v = g.value(x);
    random_mat(&mut chacha(seed), v.rows, v.cols)
}

/// Runs the whole suite. Shapes and values are drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = chacha(seed);
    let (step, tol) = (DEFAULT_STEP, DEFAULT_TOLERANCE);
    let mut out = Vec::new();
    let wseed = derive_seed(seed, &[1]);

    let (n, m, d) = (rng.gen_range(2..5), rng.gen_range(2..6), rng.gen_range(2..6));
    let qkv = [random_mat(&mut rng, n, d), random_mat(&mut rng, m, d), random_mat(&mut rng, m, 3)];
    out.push(check_inputs(
        "attention",
        &qkv,
        |g, v| {
            let a = nn::scaled_dot_product_attention(g, v[0], v[1], v[2])?;
            let w = weights_like(g, a, wseed);
            project(g, a, &w)
        },
        step,
        tol,
    )?);

    let mut set = ParameterSet::new();
    nn::init_attention(&mut set, &mut rng, "mha", 8)?;
    let x = random_mat(&mut rng, 4, 8);
    let mha = |g: &mut Graph, p: &ParamView, x: Var| -> Result<Var> {
        let a = nn::multi_head_attention(g, p, "mha", x, 2)?;
        let w = weights_like(g, a, wseed);
        project(g, a, &w)
    };
    out.push(check_inputs("mha block inputs", &[x.clone()], |g, v| mha(g, &ParamView::frozen(&set, ""), v[0]), step, tol)?);
    out.push(check_params(
        "mha block params",
        &set,
        |g, p| {
            let x = g.constant(x.clone());
            mha(g, &p, x)
        },
        step,
        tol,
        PARAM_COORDS,
        seed,
    )?);

    let mut set = ParameterSet::new();
    nn::init_attention(&mut set, &mut rng, "xattn", 4)?;
    nn::init_feed_forward(&mut set, &mut rng, "ff", 4, 8)?;
    let q = random_mat(&mut rng, 1, 4);
    let memory = random_mat(&mut rng, 5, 4);
    out.push(check_inputs(
        "cross attention + ff",
        &[q, memory],
        |g, v| {
            let p = ParamView::frozen(&set, "");
            let h = nn::cross_attention(g, &p, "xattn", v[0], v[1], 2)?;
            let h = nn::feed_forward(g, &p, "ff", h)?;
            let w = weights_like(g, h, wseed);
            project(g, h, &w)
        },
        step,
        tol,
    )?);

    let mut set = ParameterSet::new();
    nn::init_gru(&mut set, &mut rng, "gru", 4, 4)?;
    let seq = random_mat(&mut rng, 3, 4);
    let gru = |g: &mut Graph, p: &ParamView, x: Var| -> Result<Var> {
        let h = nn::recurrent_states(g, p, "gru", x)?;
        let w = weights_like(g, h, wseed);
        project(g, h, &w)
    };
    out.push(check_inputs("recurrent cell inputs", &[seq.clone()], |g, v| gru(g, &ParamView::frozen(&set, ""), v[0]), step, tol)?);
    out.push(check_params(
        "recurrent cell params",
        &set,
        |g, p| {
            let x = g.constant(seq.clone());
            gru(g, &p, x)
        },
        step,
        tol,
        PARAM_COORDS,
        seed,
    )?);

    let classes = rng.gen_range(3..6);
    let targets: Vec<usize> = (0..3).map(|_| rng.gen_range(0..classes)).collect();
    out.push(check_inputs(
        "softmax cross-entropy",
        &[random_mat(&mut rng, 3, classes)],
        |g, v| {
            let p = g.softmax_rows(v[0]);
            cross_entropy_graph(g, p, &targets)
        },
        step,
        tol,
    )?);
    out.push(check_inputs(
        "kl divergence",
        &[random_mat(&mut rng, 3, classes), random_mat(&mut rng, 3, classes)],
        |g, v| {
            let p = g.softmax_rows(v[0]);
            let q = g.softmax_rows(v[1]);
            kl_divergence_graph(g, p, q)
        },
        step,
        tol,
    )?);

    let mut cfg = GateConfig::new(3, 3).with_width(8, 2, 16);
    cfg.encoder_layers = 2;
    cfg.decoder_layers = 2;
    let gate = Gate::new(cfg, seed)?;
    let ds = generate_classification_set(2, 4, seed)?;
    let walks = extract_walks(&ds.meshes[0], 2, seed)?;
    out.push(check_params(
        "gate end to end",
        &gate.params,
        |g, p| {
            let logits = gate.forward_walks_graph(g, &p, &walks)?;
            let probs = g.softmax_rows(logits);
            let w = weights_like(g, probs, wseed);
            project(g, probs, &w)
        },
        step,
        tol,
        PARAM_COORDS,
        seed,
    )?);

    let (experts, classes) = (3, 4);
    let target = rng.gen_range(0..classes);
    let lambda = rng.gen_range(-1.0..1.0);
    let mut inputs = vec![random_mat(&mut rng, 1, experts)];
    inputs.extend((0..experts).map(|_| random_mat(&mut rng, 1, classes)));
    for kind in [Similarity::Kld, Similarity::Cosine, Similarity::Mse] {
        out.push(check_inputs(
            &format!("joint loss ({})", kind.as_str()),
            &inputs,
            |g, v| {
                let w = g.softmax_rows(v[0]);
                let preds: Vec<Var> = v[1..].iter().map(|&x| g.softmax_rows(x)).collect();
                let sim = similarity_graph(g, &preds, kind)?;
                let div = diversity_graph(g, w, &preds, &[target])?;
                let sim = g.scale(sim, lambda);
                g.add(sim, div)
            },
            step,
            tol,
        )?);
    }
    Ok(out)
}
