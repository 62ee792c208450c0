//! Zapping: resampling the final-layer connections of selected classes.
//!
//! A zapped class gets a fresh Kaiming-Normal weight row and a zero bias;
//! nothing else in the model changes.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;
use crate::rng::{kaiming_normal, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZapMode {
    Off,
    /// Reset the class about to be trained in each sequential episode.
    PerEpisodeClass,
    /// Reset `k` random classes every `E` epochs of i.i.d. training.
    IidCadence,
}

/// How many classes an i.i.d.-cadence zap resets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ZapAmount {
    Count(usize),
    Fraction(f64),
    All(AllClasses),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllClasses {
    All,
}

impl ZapAmount {
    pub const ALL: ZapAmount = ZapAmount::All(AllClasses::All);

    /// Number of classes out of `num_classes`; fractions round to nearest, at least one.
    pub fn resolve(&self, num_classes: usize) -> Result<usize> {
        let k = match *self {
            ZapAmount::Count(k) => k,
            ZapAmount::All(_) => num_classes,
            ZapAmount::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::InvalidArgument(format!("zap fraction {f} outside [0, 1]")));
                }
                ((f * num_classes as f64).round() as usize).max(1)
            }
        };
        if k > num_classes {
            return Err(Error::ZapTooMany {
                requested: k,
                classes: num_classes,
            });
        }
        Ok(k)
    }

    /// The ablation presets: 10%, 50%, 90% and all classes.
    pub fn ablation_presets() -> [ZapAmount; 4] {
        [
            ZapAmount::Fraction(0.1),
            ZapAmount::Fraction(0.5),
            ZapAmount::Fraction(0.9),
            ZapAmount::ALL,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZapPolicy {
    pub mode: ZapMode,
    pub classes: ZapAmount,
    pub every_epochs: usize,
}

impl Default for ZapPolicy {
    fn default() -> Self {
        ZapPolicy::OFF
    }
}

impl ZapPolicy {
    pub const OFF: ZapPolicy = ZapPolicy {
        mode: ZapMode::Off,
        classes: ZapAmount::ALL,
        every_epochs: 1,
    };

    pub fn per_episode_class() -> ZapPolicy {
        ZapPolicy {
            mode: ZapMode::PerEpisodeClass,
            ..ZapPolicy::OFF
        }
    }

    pub fn iid(classes: ZapAmount, every_epochs: usize) -> ZapPolicy {
        ZapPolicy {
            mode: ZapMode::IidCadence,
            classes,
            every_epochs,
        }
    }

    pub fn is_on(&self) -> bool {
        self.mode != ZapMode::Off
    }
}

/// Resamples the head row of `class` and zeroes its bias.
pub fn zap_class(model: &mut Model, class: usize, rng: &mut Rng) -> Result<()> {
    zap_classes(model, &[class], rng)
}

/// Zaps every class in `classes`, drawing rows in the given order.
pub fn zap_classes(model: &mut Model, classes: &[usize], rng: &mut Rng) -> Result<()> {
    let n = model.num_classes();
    if let Some(&index) = classes.iter().find(|&&c| c >= n) {
        return Err(Error::ClassOutOfRange { index, classes: n });
    }
    let (wi, bi) = (model.fc_weight_index(), model.fc_bias_index());
    let fan_in = model.params()[wi].shape()[1];
    let mut w = model.params()[wi].to_vec();
    let mut b = model.params()[bi].to_vec();
    for &c in classes {
        w[c * fan_in..(c + 1) * fan_in].copy_from_slice(&kaiming_normal(rng, fan_in, fan_in));
        b[c] = 0.0;
    }
    model.set_param_data(wi, w);
    model.set_param_data(bi, b);
    Ok(())
}

/// Clears Adam's moments for the head rows of `classes`.
pub fn reset_head_moments(model: &Model, adam: &mut AdamState, classes: &[usize]) {
    let (wi, bi) = (model.fc_weight_index(), model.fc_bias_index());
    let fan_in = model.params()[wi].shape()[1];
    adam.reset_rows(wi, fan_in, classes);
    adam.reset_rows(bi, 1, classes);
}

/// Fires when `epoch % every_epochs == 0`: zaps `k` distinct uniformly chosen
/// classes and returns them in ascending order. Returns an empty set otherwise.
pub fn zap_iid(model: &mut Model, policy: &ZapPolicy, epoch: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if policy.mode != ZapMode::IidCadence {
        return Err(Error::InvalidArgument("zap_iid needs the iid_cadence mode".into()));
    }
    if policy.every_epochs == 0 {
        return Err(Error::InvalidArgument("zap cadence must be positive".into()));
    }
    let n = model.num_classes();
    let k = policy.classes.resolve(n)?;
    if !epoch.is_multiple_of(policy.every_epochs) {
        return Ok(Vec::new());
    }
    let mut chosen = if k == n { (0..n).collect() } else { sample(rng, n, k).into_vec() };
    chosen.sort_unstable();
    zap_classes(model, &chosen, rng)?;
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchitectureSpec;
    use crate::rng::seeded;
    use zaplab_autograd::Tensor;

    fn head_model(classes: usize, fan_in: usize) -> Model {
        Model::linear(fan_in, classes, &mut seeded(1)).unwrap()
    }

    #[test]
    fn zap_is_local() {
        let mut m = head_model(3, 8);
        let before = m.clone_params();
        zap_class(&mut m, 1, &mut seeded(2)).unwrap();
        let (w0, w1) = (before.tensors[0].data(), m.params()[0].data());
        assert_eq!(&w0[..8], &w1[..8]);
        assert_eq!(&w0[16..], &w1[16..]);
        assert_ne!(&w0[8..16], &w1[8..16]);
        assert_eq!(m.params()[1].data()[1], 0.0);
    }

    #[test]
    fn zap_changes_only_that_logit() {
        let mut m = head_model(3, 8);
        // Give the biases nonzero values so the bias reset is visible too.
        m.set_param_data(1, vec![0.3, -0.7, 1.1]);
        let x = Tensor::new(&[1, 8], (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap();
        let before = m.forward(&x).unwrap().to_vec();
        zap_class(&mut m, 1, &mut seeded(3)).unwrap();
        let after = m.forward(&x).unwrap().to_vec();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
        assert_ne!(before[1], after[1]);
    }

    #[test]
    fn zap_out_of_range() {
        let mut m = head_model(3, 4);
        assert!(matches!(
            zap_class(&mut m, 3, &mut seeded(0)),
            Err(Error::ClassOutOfRange { index: 3, classes: 3 })
        ));
    }

    #[test]
    fn resampled_rows_have_kaiming_std() {
        let mut m = head_model(1, 8);
        let mut rng = seeded(4);
        let mut pool = Vec::with_capacity(80_000);
        for _ in 0..10_000 {
            zap_class(&mut m, 0, &mut rng).unwrap();
            pool.extend_from_slice(m.params()[0].data());
        }
        let n = pool.len() as f64;
        let mean = pool.iter().sum::<f64>() / n;
        let std = (pool.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.5).abs() / 0.5 < 0.02, "std {std}");
        assert!(mean.abs() < 3.0 * 0.5 / n.sqrt());
    }

    #[test]
    fn iid_cadence() {
        let mut m = head_model(10, 4);
        let all = ZapPolicy::iid(ZapAmount::ALL, 1);
        for epoch in 0..3 {
            assert_eq!(zap_iid(&mut m, &all, epoch, &mut seeded(5)).unwrap(), (0..10).collect::<Vec<_>>());
        }
        let every3 = ZapPolicy::iid(ZapAmount::Count(2), 3);
        let before = m.clone_params();
        assert!(zap_iid(&mut m, &every3, 2, &mut seeded(5)).unwrap().is_empty());
        assert_eq!(before.tensors[0].data(), m.params()[0].data());
        assert_eq!(zap_iid(&mut m, &every3, 3, &mut seeded(5)).unwrap().len(), 2);
    }

    #[test]
    fn iid_replay_and_bounds() {
        let policy = ZapPolicy::iid(ZapAmount::Count(5), 1);
        let a = zap_iid(&mut head_model(10, 4), &policy, 0, &mut seeded(9)).unwrap();
        let b = zap_iid(&mut head_model(10, 4), &policy, 0, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let too_many = ZapPolicy::iid(ZapAmount::Count(11), 1);
        assert!(matches!(
            zap_iid(&mut head_model(10, 4), &too_many, 0, &mut seeded(9)),
            Err(Error::ZapTooMany { requested: 11, classes: 10 })
        ));
        assert!(zap_iid(&mut head_model(10, 4), &ZapPolicy::OFF, 0, &mut seeded(9)).is_err());
    }

    #[test]
    fn zap_leaves_conv_untouched() {
        let mut m = Model::build_convnet(&ArchitectureSpec::gray(14, 4, 2), &mut seeded(6)).unwrap();
        let before = m.clone_params();
        zap_class(&mut m, 2, &mut seeded(7)).unwrap();
        for i in 0..m.fc_weight_index() {
            assert_eq!(before.tensors[i].data(), m.params()[i].data());
        }
    }

    #[test]
    fn amounts_resolve() {
        assert_eq!(ZapAmount::Fraction(0.5).resolve(10).unwrap(), 5);
        assert_eq!(ZapAmount::Fraction(0.01).resolve(10).unwrap(), 1);
        assert_eq!(ZapAmount::ALL.resolve(7).unwrap(), 7);
        assert!(ZapAmount::Fraction(1.5).resolve(10).is_err());
    }
}
