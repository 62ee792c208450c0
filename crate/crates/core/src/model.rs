//! The convolutional classifier and its parameter bookkeeping.
//!
//! A [`Model`] is an ordered list of named parameters, each labelled as
//! belonging to the feature extractor ([`ParamRole::Conv`]) or to the final
//! linear classifier ([`ParamRole::Fc`]). The forward pass is available both
//! against the model's own parameters and against an arbitrary parameter list
//! of the same shapes; the latter is what unrolled inner loops use.

use serde::{Deserialize, Serialize};
use zaplab_autograd::{no_grad, Tensor, INSTANCE_NORM_EPS};

use crate::error::{Error, Result};
use crate::rng::{kaiming_normal, Rng};

const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Conv,
    Fc,
}

/// Shape of a Convnet3/Convnet4-style classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub channels: usize,
    pub final_pool: bool,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    /// 28x28 grayscale: three blocks, last pool skipped.
    pub fn omniglot(num_classes: usize, channels: usize) -> Self {
        Self::gray(28, num_classes, channels)
    }

    /// Omniglot geometry at an arbitrary square size.
    pub fn gray(size: usize, num_classes: usize, channels: usize) -> Self {
        ArchitectureSpec {
            in_channels: 1,
            height: size,
            width: size,
            num_blocks: 3,
            channels,
            final_pool: false,
            num_classes,
        }
    }

    /// 84x84 RGB: four blocks, every block pooled.
    pub fn mini_imagenet(num_classes: usize, channels: usize) -> Self {
        ArchitectureSpec {
            in_channels: 3,
            height: 84,
            width: 84,
            num_blocks: 4,
            channels,
            final_pool: true,
            num_classes,
        }
    }

    fn pools(&self) -> usize {
        if self.final_pool {
            self.num_blocks
        } else {
            self.num_blocks.saturating_sub(1)
        }
    }

    /// Spatial extent `(h, w)` after the last block.
    pub fn output_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = (self.height, self.width);
        for _ in 0..self.pools() {
            h /= 2;
            w /= 2;
        }
        (h, w)
    }

    /// Width of the flattened features that feed the linear head.
    pub fn feature_dim(&self) -> usize {
        let (h, w) = self.output_hw();
        self.channels * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Architecture(m));
        if !(3..=4).contains(&self.num_blocks) {
            return bad(format!("num_blocks must be 3 or 4, got {}", self.num_blocks));
        }
        if self.channels == 0 || self.in_channels == 0 || self.num_classes == 0 {
            return bad("channel and class counts must be positive".into());
        }
        // Every pooled layer needs at least a 2x2 input.
        let (mut h, mut w) = (self.height, self.width);
        for _ in 0..self.pools() {
            if h < 2 || w < 2 {
                return bad(format!("{}x{} input collapses below 1x1", self.height, self.width));
            }
            h /= 2;
            w /= 2;
        }
        if h == 0 || w == 0 {
            return bad(format!("{}x{} input collapses below 1x1", self.height, self.width));
        }
        Ok(())
    }
}

/// Which network a [`Model`] instantiates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Convnet(ArchitectureSpec),
    /// A bare linear classifier on flat inputs, used for small verification models.
    Linear { input_dim: usize, num_classes: usize },
}

impl Architecture {
    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::Convnet(s) => s.num_classes,
            Architecture::Linear { num_classes, .. } => *num_classes,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            Architecture::Convnet(s) => s.feature_dim(),
            Architecture::Linear { input_dim, .. } => *input_dim,
        }
    }

    /// Per-example input shape (without the batch axis).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Architecture::Convnet(s) => vec![s.in_channels, s.height, s.width],
            Architecture::Linear { input_dim, .. } => vec![*input_dim],
        }
    }

    /// The same architecture with a head of `num_classes` outputs.
    pub fn with_classes(&self, num_classes: usize) -> Architecture {
        match self {
            Architecture::Convnet(s) => Architecture::Convnet(ArchitectureSpec {
                num_classes,
                ..s.clone()
            }),
            Architecture::Linear { input_dim, .. } => Architecture::Linear {
                input_dim: *input_dim,
                num_classes,
            },
        }
    }
}

/// Detached copy of a model's parameter values.
#[derive(Debug, Clone)]
pub struct ParamSnapshot {
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    names: Vec<String>,
    roles: Vec<ParamRole>,
    params: Vec<Tensor>,
}

fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("shape computed from spec").leaf_with_grad(true)
}

fn fresh_head(rng: &mut Rng, classes: usize, fan_in: usize) -> (Tensor, Tensor) {
    let w = param(&[classes, fan_in], kaiming_normal(rng, classes * fan_in, fan_in));
    let b = param(&[classes], vec![0.0; classes]);
    (w, b)
}

impl Model {
    /// Conv weights and the fc weight are Kaiming-Normal; all biases start at zero.
    pub fn build_convnet(spec: &ArchitectureSpec, rng: &mut Rng) -> Result<Model> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut roles = Vec::new();
        let mut params = Vec::new();
        let mut c_in = spec.in_channels;
        for b in 0..spec.num_blocks {
            let fan_in = c_in * KERNEL * KERNEL;
            let n = spec.channels * fan_in;
            params.push(param(&[spec.channels, c_in, KERNEL, KERNEL], kaiming_normal(rng, n, fan_in)));
            params.push(param(&[spec.channels], vec![0.0; spec.channels]));
            names.push(format!("block{b}.conv.weight"));
            names.push(format!("block{b}.conv.bias"));
            roles.extend([ParamRole::Conv, ParamRole::Conv]);
            c_in = spec.channels;
        }
        let (w, b) = fresh_head(rng, spec.num_classes, spec.feature_dim());
        params.extend([w, b]);
        names.extend(["fc.weight".to_string(), "fc.bias".to_string()]);
        roles.extend([ParamRole::Fc, ParamRole::Fc]);
        Ok(Model {
            arch: Architecture::Convnet(spec.clone()),
            names,
            roles,
            params,
        })
    }

    /// A linear classifier `x W^T + b` on flat inputs.
    pub fn linear(input_dim: usize, num_classes: usize, rng: &mut Rng) -> Result<Model> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::Architecture("linear model needs positive dims".into()));
        }
        let (w, b) = fresh_head(rng, num_classes, input_dim);
        Ok(Model {
            arch: Architecture::Linear { input_dim, num_classes },
            names: vec!["fc.weight".into(), "fc.bias".into()],
            roles: vec![ParamRole::Fc, ParamRole::Fc],
            params: vec![w, b],
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Index of the final layer's weight; its bias follows it.
    pub fn fc_weight_index(&self) -> usize {
        self.params.len() - 2
    }

    pub fn fc_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Indices of the parameters carrying `role`.
    pub fn indices_with_role(&self, role: ParamRole) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Replaces every parameter value. Shapes must match exactly.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        self.check_shapes(&values)?;
        self.params = values.into_iter().map(|t| t.leaf_with_grad(true)).collect();
        Ok(())
    }

    pub(crate) fn set_param_data(&mut self, index: usize, data: Vec<f64>) {
        let shape = self.params[index].shape().to_vec();
        self.params[index] = param(&shape, data);
    }

    fn check_shapes(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Snapshot(format!(
                "expected {} tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for ((name, have), want) in self.names.iter().zip(values).zip(&self.params) {
            if have.shape() != want.shape() {
                return Err(Error::Snapshot(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    want.shape(),
                    have.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn clone_params(&self) -> ParamSnapshot {
        ParamSnapshot {
            tensors: self.params.iter().map(Tensor::detach).collect(),
        }
    }

    pub fn load_params(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        self.set_params(snapshot.tensors.clone())
    }

    /// Swaps the classifier for a freshly initialized one with `num_classes`
    /// outputs (Kaiming-Normal weights, zero bias).
    pub fn replace_head(&mut self, num_classes: usize, rng: &mut Rng) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Architecture("head needs at least one class".into()));
        }
        let (w, b) = fresh_head(rng, num_classes, self.arch.feature_dim());
        let (wi, bi) = (self.fc_weight_index(), self.fc_bias_index());
        self.params[wi] = w;
        self.params[bi] = b;
        self.arch = self.arch.with_classes(num_classes);
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.arch.input_shape();
        let ok = match self.arch {
            // Linear models take any per-example layout with the right size.
            Architecture::Linear { input_dim, .. } => x.ndim() >= 2 && x.shape()[1..].iter().product::<usize>() == input_dim,
            Architecture::Convnet(_) => x.ndim() == want.len() + 1 && x.shape()[1..] == want[..],
        };
        if !ok {
            return Err(Error::Architecture(format!(
                "input shape {:?} does not match per-example shape {want:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(&self.params, x)
    }

    /// Logits for `x` computed with `params` in place of the model's own values.
    pub fn forward_with(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let feats = self.features_with(params, x)?;
        self.head_with(params, &feats)
    }

    /// Flattened feature-extractor output `[N, feature_dim]`.
    pub fn features_with(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let spec = match &self.arch {
            Architecture::Linear { .. } => return Ok(x.flatten()?),
            Architecture::Convnet(spec) => spec,
        };
        let mut h = x.clone();
        for b in 0..spec.num_blocks {
            h = h
                .conv2d(&params[2 * b])?
                .add_channel_bias(&params[2 * b + 1])?
                .instance_norm(INSTANCE_NORM_EPS)?
                .relu();
            if b + 1 < spec.num_blocks || spec.final_pool {
                h = h.maxpool2d()?;
            }
        }
        Ok(h.flatten()?)
    }

    pub fn head_with(&self, params: &[Tensor], features: &Tensor) -> Result<Tensor> {
        let (wi, bi) = (params.len() - 2, params.len() - 1);
        Ok(features.linear(&params[wi], &params[bi])?)
    }

    /// Features with no graph recorded.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        no_grad(|| self.features_with(&self.params, x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn omniglot_preset_geometry() {
        let spec = ArchitectureSpec::omniglot(1000, 256);
        spec.validate().unwrap();
        assert_eq!(spec.output_hw(), (7, 7));
        assert_eq!(spec.feature_dim(), 256 * 7 * 7);
        let mini = ArchitectureSpec::mini_imagenet(64, 256);
        mini.validate().unwrap();
        assert_eq!(mini.output_hw(), (5, 5));
        assert_eq!(mini.feature_dim(), 6400);
    }

    #[test]
    fn omniglot_model_layout() {
        let spec = ArchitectureSpec::omniglot(1000, 256);
        let m = Model::build_convnet(&spec, &mut seeded(0)).unwrap();
        assert_eq!(m.params().len(), 8);
        assert_eq!(m.indices_with_role(ParamRole::Conv).len(), 6);
        assert_eq!(m.indices_with_role(ParamRole::Fc), vec![6, 7]);
        assert_eq!(m.params()[6].shape(), &[1000, 12544]);
        assert_eq!(m.params()[0].shape(), &[256, 1, 3, 3]);
        assert_eq!(m.params()[2].shape(), &[256, 256, 3, 3]);
    }

    #[test]
    fn spatial_collapse_rejected() {
        let mut spec = ArchitectureSpec::gray(6, 5, 4);
        spec.final_pool = true;
        assert!(matches!(spec.validate(), Err(Error::Architecture(_))));
        let mut two = ArchitectureSpec::gray(28, 5, 4);
        two.num_blocks = 2;
        assert!(two.validate().is_err());
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let spec = ArchitectureSpec::gray(14, 3, 4);
        let mut m = Model::build_convnet(&spec, &mut seeded(1)).unwrap();
        let mut values = m.clone_params().tensors;
        let wi = m.fc_weight_index();
        values[wi] = Tensor::zeros(values[wi].shape());
        m.set_params(values).unwrap();
        let x = Tensor::new(&[2, 1, 14, 14], (0..392).map(|i| (i as f64).sin()).collect()).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ArchitectureSpec::gray(14, 3, 4);
        let a = Model::build_convnet(&spec, &mut seeded(5)).unwrap();
        let b = Model::build_convnet(&spec, &mut seeded(5)).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn snapshot_isolation_and_mismatch() {
        let spec = ArchitectureSpec::gray(14, 3, 4);
        let mut m = Model::build_convnet(&spec, &mut seeded(2)).unwrap();
        let snap = m.clone_params();
        let before = snap.tensors[0].to_vec();
        m.set_param_data(0, vec![9.0; before.len()]);
        assert_eq!(snap.tensors[0].data(), &before[..]);
        m.load_params(&snap).unwrap();
        assert_eq!(m.params()[0].data(), &before[..]);

        let wide = Model::build_convnet(&ArchitectureSpec::gray(14, 4, 4), &mut seeded(2)).unwrap();
        assert!(matches!(m.load_params(&wide.clone_params()), Err(Error::Snapshot(_))));
    }

    #[test]
    fn input_shape_checked() {
        let m = Model::build_convnet(&ArchitectureSpec::gray(14, 3, 4), &mut seeded(3)).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 1, 28, 28])).is_err());
        assert!(m.forward(&Tensor::zeros(&[1, 3, 14, 14])).is_err());
    }
}
