//! Central finite differences over every parameter, checked against the
//! analytic gradients.

use super::{forward, ModelError, ModelParams};
use crate::builder::TaskSample;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Tensor name and element index of the worst disagreement.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Relative error with an absolute floor: gradients below the floor are
/// compared absolutely, which keeps finite-difference roundoff (~1e-10 here)
/// from dominating near-zero entries.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn loss_of(params: &ModelParams, sample: &TaskSample, target_ids: &[u32], mask: &[bool]) -> Result<f64, ModelError> {
    let logits = forward::forward(params, &sample.image, &sample.input_text, &sample.target)?;
    forward::lm_loss(&logits, target_ids, mask)
}

/// Compares analytic gradients of the sample loss against central finite
/// differences for every parameter and reports the worst relative error.
pub fn grad_check(params: &ModelParams, sample: &TaskSample, eps: f64) -> Result<GradCheckReport, ModelError> {
    let vocab = params.cfg.vocab();
    let target_ids = sample.target.to_ids(&vocab);
    let mask = vec![true; target_ids.len()];
    let (_, analytic) = super::backward::loss_and_grad(params, sample)?;

    let mut probe = params.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..probe.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = loss_of(&probe, sample, &target_ids, &mask)?;
        probe.data[i] = orig - eps;
        let minus = loss_of(&probe, sample, &target_ids, &mask)?;
        probe.data[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let err = rel_err(analytic[i], fd);
        if err > worst.0 {
            worst = (err, i);
        }
    }
    let (name, offset) = params.layout.name_of(worst.1);
    Ok(GradCheckReport { max_rel_err: worst.0, worst: (name.to_string(), offset), checked: probe.data.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::{Task, TokenSeq};
    use crate::features::FeatureGrid;
    use crate::model::{ModelConfig, ModelParams, TypeEmbedding};
    use crate::vocab::{Token, EOS};
    use std::sync::Arc;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_text: 12,
            n_bins: 4,
            feat_dim: 5,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc_layers: 2,
            n_dec_layers: 2,
            max_enc_len: 10,
            max_dec_len: 10,
            type_embedding: TypeEmbedding::ThreeType,
        }
    }

    fn sample() -> TaskSample {
        let mut image = FeatureGrid::zeros(2, 2, 5);
        image.cell_mut(0, 1)[0] = 1.0;
        image.cell_mut(1, 0)[3] = 0.5;
        TaskSample {
            task: Task::GroundedCaptioning,
            input_text: vec![4, 6],
            image: Arc::new(image),
            target: TokenSeq::new(vec![
                Token::Text(5),
                Token::ObjOpen,
                Token::Text(7),
                Token::BoxBin(0),
                Token::BoxBin(1),
                Token::BoxBin(2),
                Token::BoxBin(3),
                Token::ObjClose,
                Token::Text(EOS),
            ])
            .unwrap(),
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let params = ModelParams::init(cfg(), 17).unwrap();
        let report = grad_check(&params, &sample(), 1e-5).unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
        assert_eq!(report.checked, params.data.len());
    }

    #[test]
    fn zero_loss_sample_has_tiny_gradients() {
        // A one-step target whose id carries a huge output bias is a
        // perfect one-hot fit; its gradients collapse toward zero.
        let mut params = ModelParams::zeros(cfg()).unwrap();
        let s = TaskSample {
            target: TokenSeq::new(vec![Token::Text(EOS)]).unwrap(),
            ..sample()
        };
        let out_b = params.layout.out_b;
        params.data[out_b.offset + EOS as usize] = 50.0;
        let (loss, grads) = super::super::backward::loss_and_grad(&params, &s).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        let max_grad = grads.iter().fold(0.0f64, |a, &g| a.max(g.abs()));
        assert!(max_grad < 1e-12, "max grad {max_grad}");
    }

    #[test]
    fn doubling_eps_quarters_truncation_error() {
        // With eps large enough that truncation dominates roundoff, the
        // central-difference error scales as eps^2.
        let params = ModelParams::init(cfg(), 23).unwrap();
        let s = sample();
        let vocab = params.cfg.vocab();
        let ids = s.target.to_ids(&vocab);
        let mask = vec![true; ids.len()];
        let (_, analytic) = super::super::backward::loss_and_grad(&params, &s).unwrap();
        // Probe a handful of parameters with sizeable gradients.
        let mut probes: Vec<usize> = (0..analytic.len()).collect();
        probes.sort_by(|&a, &b| analytic[b].abs().partial_cmp(&analytic[a].abs()).unwrap());
        let mut ratios = Vec::new();
        let mut probe_params = params.clone();
        for &i in probes.iter().take(5) {
            let fd = |p: &mut ModelParams, eps: f64| -> f64 {
                let orig = p.data[i];
                p.data[i] = orig + eps;
                let plus = loss_of(p, &s, &ids, &mask).unwrap();
                p.data[i] = orig - eps;
                let minus = loss_of(p, &s, &ids, &mask).unwrap();
                p.data[i] = orig;
                (plus - minus) / (2.0 * eps)
            };
            let err1 = (fd(&mut probe_params, 1e-2) - analytic[i]).abs();
            let err2 = (fd(&mut probe_params, 2e-2) - analytic[i]).abs();
            if err1 > 1e-12 {
                ratios.push(err2 / err1);
            }
        }
        assert!(!ratios.is_empty());
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((2.0..8.0).contains(&mean), "mean error ratio {mean} (expected ~4)");
    }
}
