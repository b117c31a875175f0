//! Finite-difference checks of every differentiable graph operation and of the
//! full network plus objective.

use formgen_core::dataio::{Play, Role};
use formgen_core::model::{bind_params, forward_on_graph, Formation, ModelConfig, ModelParams};
use formgen_core::numerics::{
    check_gradients, multi_head_attention, AttentionWeights, Dense, GradientCheck, Graph, GraphContract, KeySource,
    Tensor, Var,
};
use formgen_core::objective::{attach_loss, DisplacementTargets, LossWeights};
use formgen_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Reduces `y` to a scalar through a fixed random weighting so every output
/// element has a distinct influence.
fn project(g: &mut Graph<'_>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.value(y).shape());
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

/// Checks `op` on `TRIALS` random draws of inputs with the given shapes.
fn check_op(name: &str, shapes: &[&[usize]], op: impl for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var> + Copy) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let contract = GraphContract(move |g: &mut Graph<'_>, v: &[Var]| {
            let y = op(g, v)?;
            project(g, y, trial)
        });
        let report = check_gradients(&contract, &inputs, &GradientCheck::default()).unwrap();
        assert!(report.passed, "{name} trial {trial}: {:?}", report.worst());
    }
}

#[test]
fn linear() {
    check_op("linear", &[&[2, 3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check_op("linear_nobias", &[&[3, 4], &[4, 2]], |g, v| g.linear(v[0], v[1], None));
}

#[test]
fn bmm() {
    check_op("bmm", &[&[2, 3, 4], &[2, 4, 5]], |g, v| g.bmm(v[0], v[1], false));
    check_op("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |g, v| g.bmm(v[0], v[1], true));
}

#[test]
fn elementwise() {
    check_op("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    check_op("add_broadcast", &[&[2, 3, 4], &[3, 4]], |g, v| g.add_broadcast(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    check_op("scale", &[&[5]], |g, v| g.scale(v[0], -1.7));
    check_op("gelu", &[&[4, 3]], |g, v| g.gelu(v[0]));
    check_op("softplus", &[&[4, 3]], |g, v| g.softplus(v[0]));
    check_op("sum", &[&[2, 2, 3]], |g, v| g.sum(v[0]));
}

#[test]
fn layer_norm() {
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn masked_softmax() {
    check_op("softmax", &[&[3, 5]], |g, v| g.masked_softmax(v[0], None));
    check_op("softmax_masked", &[&[2, 3, 4]], |g, v| {
        g.masked_softmax(v[0], Some(&[true, false, true, true]))
    });
}

#[test]
fn shape_ops() {
    check_op("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    check_op("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]));
    check_op("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
    check_op("concat_last", &[&[3, 2], &[3, 4]], |g, v| g.concat_last(v[0], v[1]));
    check_op("tile", &[&[2, 3]], |g, v| g.tile(v[0], 3));
    check_op("repeat_rows", &[&[3, 2]], |g, v| g.repeat_rows(v[0], 4));
    check_op("slice_rows", &[&[5, 2]], |g, v| g.slice_rows(v[0], 1, 3));
    check_op("masked_mean_rows", &[&[2, 4, 3]], |g, v| {
        g.masked_mean_rows(v[0], &[true, false, true, true])
    });
}

/// The key bias adds the same score to every key, so softmax cancels it and
/// its gradient is identically zero; finite differences there measure only
/// roundoff. It is held constant and the slot `v[3]` goes unused.
fn attention_weights(g: &mut Graph<'_>, v: &[Var]) -> AttentionWeights<Var> {
    let d = |i: usize| Dense { w: v[i], b: v[i + 1] };
    let key_bias = g.constant(Tensor::zeros(&[4]));
    AttentionWeights {
        query: d(0),
        key: Dense { w: v[2], b: key_bias },
        value: d(4),
        output: d(6),
    }
}

#[test]
fn attention() {
    let w: [&[usize]; 8] = [&[4, 4], &[4], &[4, 4], &[4], &[4, 4], &[4], &[4, 4], &[4]];
    let mut shapes = w.to_vec();
    shapes.push(&[2, 3, 4]);
    shapes.push(&[2, 3, 3]);
    check_op("self_attention_bias", &shapes, |g, v| {
        let w = attention_weights(g, v);
        multi_head_attention(
            g,
            v[8],
            KeySource::PerGroup(v[8]),
            &w,
            2,
            Some(v[9]),
            Some(&[true, true, false]),
        )
    });
    let mut shapes = w.to_vec();
    shapes.push(&[3, 2, 4]);
    shapes.push(&[5, 4]);
    check_op("cross_attention", &shapes, |g, v| {
        let w = attention_weights(g, v);
        multi_head_attention(g, v[8], KeySource::Shared(v[9]), &w, 2, None, None)
    });
}

fn random_play(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Play {
    let formation: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.random_range(-0.1..0.0), rng.random_range(-0.5..0.5)])
        .collect();
    let trajectory = (0..t)
        .map(|f| {
            formation
                .iter()
                .map(|p| {
                    if f == 0 {
                        *p
                    } else {
                        [p[0] + rng.random_range(-0.2..0.2), p[1] + rng.random_range(-0.2..0.2)]
                    }
                })
                .collect()
        })
        .collect();
    Play {
        play_id: "gc".into(),
        formation,
        roles: (0..n).map(|_| Role::ALL[rng.random_range(0..8)]).collect(),
        trajectory,
        frame_valid: vec![true; t],
        agent_valid: vec![true; n],
        frame_rate: 10.0,
        concept: None,
    }
}

/// Total loss through the whole network on the tiny configuration.
#[test]
fn full_model_total_loss() {
    let cfg = ModelConfig::tiny();
    assert_eq!(
        (cfg.hidden_dim, cfg.num_layers, cfg.num_heads, cfg.mixture_components),
        (8, 1, 2, 2)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let play = random_play(&mut rng, 3, 4);
    let params = ModelParams::init(&cfg, 5).unwrap();
    let targets = DisplacementTargets::from_play(&play, cfg.prediction_target).unwrap();
    let weights = LossWeights::default();
    let contract = GraphContract(|g: &mut Graph<'_>, vars: &[Var]| {
        let f = Formation::new(&play.formation, &play.roles, &play.agent_valid);
        let out = forward_on_graph(g, &params, vars, &f, play.num_frames())?;
        Ok(attach_loss(g, &out, &targets, &weights, cfg.covariance_floor)?.0)
    });
    let report = check_gradients(&contract, &params.tensors, &GradientCheck::default()).unwrap();
    assert!(report.passed, "{:?}", report.worst());
    assert_eq!(report.checked, params.count());

    // The graph path agrees with binding the parameters directly.
    let mut g = Graph::new();
    let vars = bind_params(&mut g, &params, true);
    let f = Formation::new(&play.formation, &play.roles, &play.agent_valid);
    let out = forward_on_graph(&mut g, &params, &vars, &f, 4).unwrap();
    let (loss, _) = attach_loss(&mut g, &out, &targets, &weights, cfg.covariance_floor).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(vars.iter().all(|v| grads.get(*v).is_some()));
}
