//! Displacement errors, sample diversity and weight utilization, all in yards
//! or nats.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{NormalizationSpec, Play};
use crate::error::{Error, Result};
use crate::model::Formation;
use crate::objective::argmax;
use crate::sampler::{average_weights, draw_samples, sample_seed, NoiseMode, Predictor, SampleConfig};

fn check_shapes(a: &[Vec<[f64; 2]>], b: &[Vec<[f64; 2]>], frames: &[bool], agents: &[bool]) -> Result<()> {
    let ok = a.len() == b.len()
        && a.len() == frames.len()
        && a.iter().zip(b).all(|(x, y)| x.len() == agents.len() && y.len() == agents.len());
    if ok {
        Ok(())
    } else {
        Err(Error::shape(
            "displacement metric",
            format!("{} vs {} frames, {} frame and {} agent mask entries", a.len(), b.len(), frames.len(), agents.len()),
        ))
    }
}

/// Mean distance in yards over valid `(t ≥ 1, i)` pairs.
pub fn ade(
    pred: &[Vec<[f64; 2]>],
    truth: &[Vec<[f64; 2]>],
    frame_valid: &[bool],
    agent_valid: &[bool],
    spec: &NormalizationSpec,
) -> Result<f64> {
    check_shapes(pred, truth, frame_valid, agent_valid)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in (1..pred.len()).filter(|&t| frame_valid[t]) {
        for i in (0..agent_valid.len()).filter(|&i| agent_valid[i]) {
            sum += spec.distance_yards(pred[t][i], truth[t][i]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoValidPairs);
    }
    Ok(sum / count as f64)
}

/// Mean distance in yards at the last valid frame.
pub fn fde(
    pred: &[Vec<[f64; 2]>],
    truth: &[Vec<[f64; 2]>],
    frame_valid: &[bool],
    agent_valid: &[bool],
    spec: &NormalizationSpec,
) -> Result<f64> {
    check_shapes(pred, truth, frame_valid, agent_valid)?;
    let last = (1..pred.len()).rev().find(|&t| frame_valid[t]).ok_or(Error::NoValidPairs)?;
    let dists: Vec<f64> = (0..agent_valid.len())
        .filter(|&i| agent_valid[i])
        .map(|i| spec.distance_yards(pred[last][i], truth[last][i]))
        .collect();
    if dists.is_empty() {
        return Err(Error::NoValidPairs);
    }
    Ok(dists.iter().sum::<f64>() / dists.len() as f64)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn mixture_entropy(pi_bar: &[f64]) -> f64 {
    -pi_bar.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Mean [`ade`] over all unordered pairs of samples.
pub fn apd<T: AsRef<[Vec<[f64; 2]>]>>(
    samples: &[T],
    frame_valid: &[bool],
    agent_valid: &[bool],
    spec: &NormalizationSpec,
) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!("APD needs at least 2 samples, got {}", samples.len())));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for a in 0..samples.len() {
        for b in a + 1..samples.len() {
            sum += ade(samples[a].as_ref(), samples[b].as_ref(), frame_valid, agent_valid, spec)?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// How the trajectory scored against ground truth is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalMode {
    /// `τ = 0` with `k = argmax π̄`.
    #[default]
    ConceptMean,
    /// Errors averaged over the diversity samples drawn at `temperature`.
    Sampled { temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub mode: EvalMode,
    /// Samples per formation for APD; 0 skips diversity.
    pub apd_samples: usize,
    pub apd_temperature: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    /// Truncated horizons `T'`, formation frame included.
    pub horizons: Vec<usize>,
    pub normalization: NormalizationSpec,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::ConceptMean,
            apd_samples: 10,
            apd_temperature: 0.8,
            noise_mode: NoiseMode::SharedEps,
            seed: 0,
            horizons: Vec::new(),
            normalization: NormalizationSpec::default(),
        }
    }
}

impl EvalOptions {
    /// Concept-mean errors only, as used for early stopping.
    pub fn errors_only() -> Self {
        Self {
            apd_samples: 0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.apd_samples == 1 {
            return Err(Error::InvalidArgument("apd_samples must be 0 or at least 2".into()));
        }
        if let EvalMode::Sampled { temperature } = self.mode {
            if self.apd_samples == 0 {
                return Err(Error::InvalidArgument("sampled evaluation needs apd_samples >= 2".into()));
            }
            if !(temperature >= 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidArgument(format!("temperature {temperature}")));
            }
        }
        self.normalization.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub ade: f64,
    pub fde: f64,
    pub apd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub plays: usize,
    pub mode: EvalMode,
    pub ade: f64,
    pub fde: f64,
    pub mixture_entropy: f64,
    pub apd: Option<f64>,
    pub per_horizon: Vec<HorizonRow>,
}

impl MetricsReport {
    /// Aligned text table of the headline numbers and any horizon rows.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10} {:>10}", "horizon", "ADE", "FDE", "APD", "entropy");
        let _ = writeln!(
            s,
            "{:<10} {:>10.4} {:>10.4} {:>10} {:>10.4}",
            "full",
            self.ade,
            self.fde,
            opt(self.apd),
            self.mixture_entropy
        );
        for r in &self.per_horizon {
            let _ = writeln!(s, "{:<10} {:>10.4} {:>10.4} {:>10} {:>10}", r.horizon, r.ade, r.fde, opt(r.apd), "");
        }
        let _ = write!(s, "{} plays, yards / nats", self.plays);
        s
    }
}

struct PlayScores {
    ade: f64,
    fde: f64,
    entropy: f64,
    apd: Option<f64>,
    horizons: Vec<(f64, f64, Option<f64>)>,
}

fn mean_over<T: AsRef<[Vec<[f64; 2]>]>>(
    preds: &[T],
    f: impl Fn(&[Vec<[f64; 2]>]) -> Result<f64>,
) -> Result<f64> {
    let mut sum = 0.0;
    for p in preds {
        sum += f(p.as_ref())?;
    }
    Ok(sum / preds.len() as f64)
}

fn score_play<P: Predictor + ?Sized>(model: &P, play: &Play, index: usize, opts: &EvalOptions) -> Result<PlayScores> {
    let t_len = play.num_frames();
    if let Some(&h) = opts.horizons.iter().find(|&&h| h < 2 || h > t_len) {
        return Err(Error::InvalidArgument(format!(
            "horizon {h} outside [2, {t_len}] for play {}",
            play.play_id
        )));
    }
    let formation = Formation::new(&play.formation, &play.roles, &play.agent_valid);
    let mog = model.predict(&formation, t_len)?;
    let pi_bar = average_weights(&mog);
    let cfg = model.model_config();

    let diverse = if opts.apd_samples >= 2 {
        let sc = SampleConfig {
            temperature: match opts.mode {
                EvalMode::Sampled { temperature } => temperature,
                EvalMode::ConceptMean => opts.apd_temperature,
            },
            seed: sample_seed(opts.seed, index as u64),
            component_override: None,
            num_samples: opts.apd_samples,
            noise_mode: opts.noise_mode,
        };
        draw_samples(&mog, &play.formation, cfg, &sc)?
            .into_iter()
            .map(|g| g.trajectory)
            .collect()
    } else {
        Vec::new()
    };
    let scored = match opts.mode {
        EvalMode::ConceptMean => {
            let sc = SampleConfig {
                temperature: 0.0,
                component_override: Some(argmax(&pi_bar)),
                num_samples: 1,
                ..SampleConfig::default()
            };
            draw_samples(&mog, &play.formation, cfg, &sc)?
                .into_iter()
                .map(|g| g.trajectory)
                .collect()
        }
        EvalMode::Sampled { .. } => diverse.clone(),
    };

    let spec = &opts.normalization;
    let (fv, av) = (&play.frame_valid, &play.agent_valid);
    let truth = &play.trajectory;
    let evaluate_to = |h: usize| -> Result<(f64, f64, Option<f64>)> {
        let cut: Vec<&[Vec<[f64; 2]>]> = scored.iter().map(|s: &Vec<Vec<[f64; 2]>>| &s[..h]).collect();
        let a = mean_over(&cut, |p| ade(p, &truth[..h], &fv[..h], av, spec))?;
        let f = mean_over(&cut, |p| fde(p, &truth[..h], &fv[..h], av, spec))?;
        let d = if diverse.is_empty() {
            None
        } else {
            let cut: Vec<&[Vec<[f64; 2]>]> = diverse.iter().map(|s: &Vec<Vec<[f64; 2]>>| &s[..h]).collect();
            Some(apd(&cut, &fv[..h], av, spec)?)
        };
        Ok((a, f, d))
    };
    let (ade, fde, apd) = evaluate_to(t_len)?;
    let horizons = opts.horizons.iter().map(|&h| evaluate_to(h)).collect::<Result<_>>()?;
    Ok(PlayScores {
        ade,
        fde,
        entropy: mixture_entropy(&pi_bar),
        apd,
        horizons,
    })
}

/// Scores `model` on every play; plays are evaluated in parallel and
/// averaged in dataset order.
pub fn evaluate<P: Predictor + Sync + ?Sized>(model: &P, plays: &[Play], opts: &EvalOptions) -> Result<MetricsReport> {
    opts.validate()?;
    if plays.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let scores: Vec<PlayScores> = plays
        .par_iter()
        .enumerate()
        .map(|(i, p)| score_play(model, p, i, opts))
        .collect::<Result<_>>()?;
    let n = scores.len() as f64;
    let mean = |f: &dyn Fn(&PlayScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&PlayScores) -> Option<f64>| {
        scores.iter().map(f).sum::<Option<f64>>().map(|s| s / n)
    };
    let per_horizon = opts
        .horizons
        .iter()
        .enumerate()
        .map(|(j, &horizon)| HorizonRow {
            horizon,
            ade: mean(&|s| s.horizons[j].0),
            fde: mean(&|s| s.horizons[j].1),
            apd: mean_opt(&|s| s.horizons[j].2),
        })
        .collect();
    Ok(MetricsReport {
        plays: scores.len(),
        mode: opts.mode,
        ade: mean(&|s| s.ade),
        fde: mean(&|s| s.fde),
        mixture_entropy: mean(&|s| s.entropy),
        apd: mean_opt(&|s| s.apd),
        per_horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize_dataset, SyntheticConfig};
    use crate::model::{ModelConfig, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> NormalizationSpec {
        NormalizationSpec::default()
    }

    /// `frames × agents` trajectory with every point at `p` (normalized).
    fn constant(frames: usize, agents: usize, p: [f64; 2]) -> Vec<Vec<[f64; 2]>> {
        vec![vec![p; agents]; frames]
    }

    fn yards(x: f64, y: f64) -> [f64; 2] {
        spec().to_normalized([x, y])
    }

    #[test]
    fn ade_examples() {
        let truth = constant(5, 3, [0.0, 0.0]);
        let all = vec![true; 5];
        let agents = vec![true; 3];
        assert_eq!(ade(&truth, &truth, &all, &agents, &spec()).unwrap(), 0.0);
        let pred = constant(5, 3, yards(3.0, 4.0));
        assert!((ade(&pred, &truth, &all, &agents, &spec()).unwrap() - 5.0).abs() < 1e-12);

        let mut pred = truth.clone();
        for (t, frame) in pred.iter_mut().enumerate() {
            let off = if t % 2 == 0 { 1.0 } else { 3.0 };
            frame.iter_mut().for_each(|p| *p = yards(off, 0.0));
        }
        let half = vec![true, false, true, false, true];
        // Frames 2 and 4 are valid beyond the formation, both offset 1 yard.
        assert!((ade(&pred, &truth, &half, &agents, &spec()).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            ade(&pred, &truth, &[true, false, false, false, false], &agents, &spec()),
            Err(Error::NoValidPairs)
        ));
        assert!(ade(&pred, &truth[..4], &half, &agents, &spec()).is_err());
    }

    #[test]
    fn frame_zero_is_excluded() {
        let truth = constant(3, 1, [0.0, 0.0]);
        let mut pred = truth.clone();
        pred[0][0] = yards(10.0, 0.0);
        assert_eq!(ade(&pred, &truth, &[true; 3], &[true], &spec()).unwrap(), 0.0);
    }

    #[test]
    fn fde_examples() {
        let t_len = 6;
        let truth = constant(t_len, 2, [0.0, 0.0]);
        let mut pred = truth.clone();
        pred[t_len - 1] = vec![yards(0.0, 2.0); 2];
        let fv = vec![true; t_len];
        let av = vec![true; 2];
        assert!((fde(&pred, &truth, &fv, &av, &spec()).unwrap() - 2.0).abs() < 1e-12);
        let a = ade(&pred, &truth, &fv, &av, &spec()).unwrap();
        assert!((a - 2.0 / (t_len - 1) as f64).abs() < 1e-12);
        assert_eq!(fde(&truth, &truth, &fv, &av, &spec()).unwrap(), 0.0);

        let mut trailing = fv.clone();
        trailing[t_len - 1] = false;
        pred[t_len - 2] = vec![yards(0.0, 1.5); 2];
        assert!((fde(&pred, &truth, &trailing, &av, &spec()).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert!((mixture_entropy(&[0.125; 8]) - 2.079442).abs() < 1e-6);
        assert!((mixture_entropy(&[0.125; 8]) - 8f64.ln()).abs() < 1e-12);
        assert_eq!(mixture_entropy(&[0.0, 1.0, 0.0]), 0.0);
        let h = mixture_entropy(&[0.7, 0.2, 0.1]);
        assert!(h > 0.0 && h < 3f64.ln());
    }

    #[test]
    fn apd_examples() {
        let fv = vec![true; 4];
        let av = vec![true; 2];
        let a = constant(4, 2, [0.0, 0.0]);
        let b = constant(4, 2, yards(0.0, 2.0));
        assert!((apd(&[a.clone(), b.clone()], &fv, &av, &spec()).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(apd(&vec![a.clone(); 10], &fv, &av, &spec()).unwrap(), 0.0);
        assert!(apd(&[a.clone()], &fv, &av, &spec()).is_err());

        // Ten samples on a line, 1 yard apart: mean of |i−j| over 45 pairs is 11/3.
        let line: Vec<_> = (0..10).map(|i| constant(4, 2, yards(i as f64, 0.0))).collect();
        let expected = (0..10).flat_map(|i| (i + 1..10).map(move |j| (j - i) as f64)).sum::<f64>() / 45.0;
        assert!((expected - 11.0 / 3.0).abs() < 1e-12);
        assert!((apd(&line, &fv, &av, &spec()).unwrap() - expected).abs() < 1e-12);
    }

    fn small_setup() -> (ModelParams, Vec<Play>) {
        let scfg = SyntheticConfig {
            plays_per_concept: 2,
            ..SyntheticConfig::default()
        };
        let plays = synthesize_dataset(&scfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = ModelConfig {
            max_frames: 20,
            mixture_components: 3,
            ..ModelConfig::tiny()
        };
        (ModelParams::init(&cfg, 4).unwrap(), plays)
    }

    #[test]
    fn evaluate_report_consistency() {
        let (model, plays) = small_setup();
        let opts = EvalOptions {
            horizons: vec![2, 10, 20],
            ..EvalOptions::default()
        };
        let r = evaluate(&model, &plays, &opts).unwrap();
        assert_eq!(r.plays, plays.len());
        assert!(r.ade >= 0.0 && r.fde >= 0.0 && r.apd.unwrap() >= 0.0);
        assert!(r.mixture_entropy >= 0.0 && r.mixture_entropy <= 3f64.ln() + 1e-12);
        let full = r.per_horizon.last().unwrap();
        assert_eq!((full.ade, full.fde, full.apd), (r.ade, r.fde, r.apd));
        assert_eq!(r, evaluate(&model, &plays, &opts).unwrap());
        assert!(r.to_table().contains("ADE"));

        let bad = EvalOptions {
            horizons: vec![21],
            ..EvalOptions::default()
        };
        assert!(evaluate(&model, &plays, &bad).is_err());
        let bad = EvalOptions {
            horizons: vec![1],
            ..EvalOptions::default()
        };
        assert!(evaluate(&model, &plays, &bad).is_err());
        assert!(evaluate(&model, &[], &opts).is_err());
    }

    #[test]
    fn concept_mean_matches_manual_rollout() {
        let (model, plays) = small_setup();
        let r = evaluate(&model, &plays[..1], &EvalOptions::errors_only()).unwrap();
        assert!(r.apd.is_none());
        let p = &plays[0];
        let f = Formation::new(&p.formation, &p.roles, &p.agent_valid);
        let mog = model.predict(&f, p.num_frames()).unwrap();
        let k = argmax(&average_weights(&mog));
        let pred: Vec<Vec<[f64; 2]>> = (0..p.num_frames())
            .map(|t| {
                (0..p.num_agents())
                    .map(|i| {
                        if t == 0 {
                            p.formation[i]
                        } else {
                            let m = mog.mu(t - 1, i, k);
                            [p.formation[i][0] + m[0], p.formation[i][1] + m[1]]
                        }
                    })
                    .collect()
            })
            .collect();
        let expected = ade(&pred, &p.trajectory, &p.frame_valid, &p.agent_valid, &spec()).unwrap();
        assert!((r.ade - expected).abs() < 1e-12);
    }

    #[test]
    fn sampled_mode_and_zero_temperature_diversity() {
        let (model, plays) = small_setup();
        let sampled = EvalOptions {
            mode: EvalMode::Sampled { temperature: 0.8 },
            ..EvalOptions::default()
        };
        let r = evaluate(&model, &plays, &sampled).unwrap();
        assert!(r.apd.unwrap() > 0.0);
        let cold = EvalOptions {
            apd_temperature: 0.0,
            ..EvalOptions::default()
        };
        assert_eq!(evaluate(&model, &plays, &cold).unwrap().apd, Some(0.0));
    }
}
