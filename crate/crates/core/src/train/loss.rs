use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::pipeline::Label;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-12;
/// Head outputs further than this outside `[0, 1]` are treated as a bug.
pub const PROB_TOLERANCE: f64 = 1e-9;

fn check_probs(values: &Tensor) -> Result<()> {
    for &p in values.data() {
        if !p.is_finite() || !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&p) {
            return Err(Error::invalid(format!(
                "head produced probability {p}, outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Records the task loss of one sample on `g` and returns the scalar.
///
/// Binary tasks use cross-entropy on the two-class softmax with the
/// positive term scaled by `pos_weight`; length of stay uses plain
/// cross-entropy; phenotyping averages one binary cross-entropy per label.
pub fn task_loss(g: &mut Graph, probs: Var, y: &Label, task: Task, pos_weight: f64) -> Result<Var> {
    check_probs(g.value(probs))?;
    let n = g.value(probs).numel();
    let target = y.target(n)?;
    let logp = {
        let c = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
        g.ln(c)
    };
    if task.is_multilabel() {
        let inv = {
            let neg = g.scale(probs, -1.0);
            let q = g.offset(neg, 1.0);
            let c = g.clamp(q, PROB_EPS, 1.0 - PROB_EPS);
            g.ln(c)
        };
        let k = n as f64;
        let a = g.constant(Tensor::new([n], target.iter().map(|t| -t / k).collect())?);
        let b = g.constant(Tensor::new(
            [n],
            target.iter().map(|t| -(1.0 - t) / k).collect(),
        )?);
        let pos = g.mul(logp, a)?;
        let neg = g.mul(inv, b)?;
        let both = g.add(pos, neg)?;
        return Ok(g.sum_all(both));
    }
    let weights: Vec<f64> = match task {
        Task::Ihm | Task::Decompensation => vec![-target[0], -pos_weight * target[1]],
        _ => target.iter().map(|t| -t).collect(),
    };
    let w = g.constant(Tensor::new([n], weights)?);
    let terms = g.mul(logp, w)?;
    Ok(g.sum_all(terms))
}

/// Loss value without recording gradients.
pub fn loss_value(probs: &Tensor, y: &Label, task: Task, pos_weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = task_loss(&mut g, p, y, task, pos_weight)?;
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(positive: bool) -> Label {
        Label::Binary { positive }
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let one_hot = Tensor::new([2], vec![0.0, 1.0]).unwrap();
        assert!(loss_value(&one_hot, &binary(true), Task::Ihm, 1.0).unwrap() <= 1e-6);
        let bucket = Label::Bucket {
            bucket: 3,
            remaining_hours: 80.0,
        };
        let mut p = vec![0.0; 10];
        p[3] = 1.0;
        assert!(
            loss_value(&Tensor::new([10], p).unwrap(), &bucket, Task::Los, 1.0).unwrap() <= 1e-6
        );
    }

    #[test]
    fn uniform_binary_is_ln2() {
        let half = Tensor::new([2], vec![0.5, 0.5]).unwrap();
        for y in [true, false] {
            let l = loss_value(&half, &binary(y), Task::Decompensation, 1.0).unwrap();
            assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let w = loss_value(&half, &binary(true), Task::Ihm, 3.0).unwrap();
        assert!((w - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn phenotype_is_mean_of_label_bces() {
        let p = Tensor::new([3], vec![0.9, 0.2, 0.5]).unwrap();
        let y = Label::MultiLabel {
            labels: vec![true, false, true],
        };
        let expected = -((0.9f64).ln() + (0.8f64).ln() + (0.5f64).ln()) / 3.0;
        let l = loss_value(&p, &y, Task::Phenotype, 1.0).unwrap();
        assert!((l - expected).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_probability_is_an_error() {
        let bad = Tensor::new([2], vec![-0.1, 1.1]).unwrap();
        assert!(loss_value(&bad, &binary(true), Task::Ihm, 1.0).is_err());
    }

    #[test]
    fn bce_gradient_at_point_eight() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new([2], vec![0.2, 0.8]).unwrap());
        let l = task_loss(&mut g, p, &binary(true), Task::Ihm, 1.0).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap();
        assert_eq!(grad.data()[0], 0.0);
        assert!((grad.data()[1] + 1.0 / 0.8).abs() < 1e-12);
    }
}
