//! Finite-difference suites behind the `gradcheck` command.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CliError;
use crate::attention::{level_rows, normalized_reference_grid, sparse_attention_tape, SparseAttentionParams, SparseAttentionVars, SparseGeometry};
use crate::boundary::{make_boundary_targets, refine_logits_tape, DIRECTION_BINS};
use crate::data::{generate_scene, SceneSpec};
use crate::model::{EptConfig, Mode, Unept};
use crate::numerics::{check_param_gradients, GradcheckReport, GradcheckSettings, ParamGroup, ParamStore, Tape, Tensor, Var};
use crate::training::{segmentation_loss, LossWeights};

/// Largest image side the model suite accepts.
pub const MAX_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Attention,
    Boundary,
    Model,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Attention => "attention",
            Suite::Boundary => "boundary",
            Suite::Model => "model",
        }
    }
}

/// `all` or one suite name.
pub fn parse_module(s: &str) -> Result<Vec<Suite>, CliError> {
    match s {
        "all" => Ok(vec![Suite::Attention, Suite::Boundary, Suite::Model]),
        _ => Ok(vec![Suite::from_str(s)?]),
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        [Suite::Attention, Suite::Boundary, Suite::Model]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Usage(format!("unknown gradcheck module {s:?}, expected all|attention|boundary|model")))
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<'_>, out: Var, rng: &mut ChaCha8Rng) -> Result<Var, CliError> {
    let r = random_tensor(rng, tape.shape(out), -1.0, 1.0);
    let r = tape.constant(r)?;
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod)?)
}

/// Three-scale sparse attention with random weights, offsets, queries and values.
pub fn attention_suite(seed: u64) -> Result<GradcheckReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = SparseGeometry { d_model: 8, heads: 2, head_dim: 4, points: 3, levels: 3 };
    let shapes = [(4, 4), (2, 2), (1, 1)];
    let grid = level_rows(&shapes);
    let tokens: usize = shapes.iter().map(|(h, w)| h * w).sum();
    let nq = 5;
    let p = SparseAttentionParams::random(g, &mut rng)?;
    let mut store = ParamStore::new();
    for (name, t) in [
        ("wq", &p.wq),
        ("wv", &p.wv),
        ("u_wts", &p.u_wts),
        ("b_wts", &p.b_wts),
        ("u_pos", &p.u_pos),
        ("b_pos", &p.b_pos),
        ("wo", &p.wo),
    ] {
        store.add(format!("attention.{name}"), t.clone(), ParamGroup::Head);
    }
    store.add("attention.queries", random_tensor(&mut rng, &[nq, g.d_model], -1.0, 1.0), ParamGroup::Head);
    store.add("attention.values", random_tensor(&mut rng, &[tokens, g.d_model], -1.0, 1.0), ParamGroup::Head);
    let refs = random_tensor(&mut rng, &[nq, 2], 0.1, 0.9);
    let base = normalized_reference_grid(&refs, &grid, &g)?;
    let probe_seed = rng.gen();
    let settings = GradcheckSettings::default();
    check_param_gradients(&mut store, &settings, |tape, store| -> Result<Var, CliError> {
        let id = |n: &str| store.id(&format!("attention.{n}")).expect("registered above");
        let vars = SparseAttentionVars {
            geometry: g,
            wq: tape.param(store, id("wq"))?,
            wv: tape.param(store, id("wv"))?,
            u_wts: tape.param(store, id("u_wts"))?,
            b_wts: tape.param(store, id("b_wts"))?,
            u_pos: tape.param(store, id("u_pos"))?,
            b_pos: tape.param(store, id("b_pos"))?,
            wo: tape.param(store, id("wo"))?,
        };
        let q = tape.param(store, id("queries"))?;
        let v = tape.param(store, id("values"))?;
        let out = sparse_attention_tape(tape, &vars, q, v, &grid, base.clone())?;
        project(tape, out.out, &mut ChaCha8Rng::seed_from_u64(probe_seed))
    })
}

/// Refinement blend with respect to the segmentation logits and the
/// boundary probabilities.
pub fn boundary_suite(seed: u64) -> Result<GradcheckReport, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, h, w) = (3, 8, 8);
    let mut store = ParamStore::new();
    store.add("boundary.seg_logits", random_tensor(&mut rng, &[k, h, w], -2.0, 2.0), ParamGroup::Head);
    store.add("boundary.prob", random_tensor(&mut rng, &[h, w], 0.05, 0.95), ParamGroup::Head);
    let directions = random_tensor(&mut rng, &[DIRECTION_BINS, h, w], -1.0, 1.0);
    let probe_seed = rng.gen();
    check_param_gradients(&mut store, &GradcheckSettings::default(), |tape, store| -> Result<Var, CliError> {
        let seg = tape.param(store, store.id("boundary.seg_logits").expect("registered"))?;
        let prob = tape.param(store, store.id("boundary.prob").expect("registered"))?;
        let refined = refine_logits_tape(tape, seg, prob, &directions)?;
        project(tape, refined, &mut ChaCha8Rng::seed_from_u64(probe_seed))
    })
}

/// Full training loss of the smallest network on one synthetic 32×32 scene
/// with three classes, differentiated with respect to every parameter.
pub fn model_suite(seed: u64) -> Result<GradcheckReport, CliError> {
    let config = EptConfig::tiny(3);
    let spec = SceneSpec { size: MAX_SIDE, classes: 3, min_extent: 8, max_extent: 16, seed, ..SceneSpec::default() };
    let sample = generate_scene(&spec, 0)?;
    let targets = make_boundary_targets(&sample.labels, crate::boundary::DEFAULT_GAMMA)?;
    let (model, mut store) = Unept::init(config, seed)?;
    let weights = LossWeights::default();
    // absolute comparison below 1e-5
    let settings = GradcheckSettings { floor: 1e-5, ..GradcheckSettings::default() };
    check_param_gradients(&mut store, &settings, |tape, store| -> Result<Var, CliError> {
        let image = tape.constant(sample.image.clone())?;
        let out = model.forward(tape, store, image, &mut Mode::Eval)?;
        let prob = tape.sigmoid(out.boundary_logits)?;
        let directions = tape.value(out.direction_logits).clone();
        let refined = refine_logits_tape(tape, out.seg_logits, prob, &directions)?;
        let terms = segmentation_loss(
            tape,
            out.seg_logits,
            refined,
            out.boundary_logits,
            out.direction_logits,
            &sample.labels,
            &targets,
            &weights,
        )?;
        Ok(terms.total)
    })
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<GradcheckReport, CliError> {
    match suite {
        Suite::Attention => attention_suite(seed),
        Suite::Boundary => boundary_suite(seed),
        Suite::Model => model_suite(seed),
    }
}
