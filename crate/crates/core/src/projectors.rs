//! Learnable image and text projectors.
//!
//! The image projector is a single linear map applied independently at every
//! spatial location, followed by L2 normalization. The text projector is
//! `linear → batch norm → ReLU → linear`, followed by L2 normalization.
//! Weights are stored `[in, out]`, so a layer computes `x · W + b`.

use serde::{Deserialize, Serialize};

use crate::diffmath::{BatchNormState, ColumnStats, DenseArray, NormMode, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::XorShift64Star;

pub const DEFAULT_FEATURE_DIM: usize = 512;
pub const DEFAULT_HIDDEN_DIM: usize = 384;
pub const DEFAULT_PROJECTED_DIM: usize = 256;

/// Names of the trainable tensors, in the order [`ProjectorParams::register`]
/// binds them.
pub const TRAINABLE_NAMES: [&str; 8] = [
    "image.weight",
    "image.bias",
    "text.fc1.weight",
    "text.fc1.bias",
    "text.bn.gamma",
    "text.bn.beta",
    "text.fc2.weight",
    "text.fc2.bias",
];

/// One image's local feature map with its multi-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `height × width × channels`, channel fastest.
    pub values: Vec<f32>,
    /// One entry per class, each 0 or 1.
    pub labels: Vec<u8>,
}

impl FeatureGrid {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim("feature grid extents must be positive"));
        }
        if values.len() != height * width * channels {
            return Err(Error::dim(format!(
                "grid {height}×{width}×{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            height,
            width,
            channels,
            values,
            labels,
        })
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn location(&self, h: usize, w: usize) -> &[f32] {
        let at = (h * self.width + w) * self.channels;
        &self.values[at..at + self.channels]
    }

    /// Spatial mean as a 1×1 grid (the pool-then-project ablation).
    pub fn mean_pooled(&self) -> FeatureGrid {
        let mut acc = vec![0.0f64; self.channels];
        for loc in self.values.chunks_exact(self.channels) {
            for (a, &v) in acc.iter_mut().zip(loc) {
                *a += v as f64;
            }
        }
        let n = self.locations() as f64;
        FeatureGrid {
            image_id: self.image_id.clone(),
            height: 1,
            width: 1,
            channels: self.channels,
            values: acc.into_iter().map(|a| (a / n) as f32).collect(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub positive: String,
    pub negative: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            positive: "a photo of a {classname}.".into(),
            negative: "a photo without {classname}.".into(),
        }
    }
}

/// Raw per-class text features for a positive and a negative prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TextBank {
    pub class_names: Vec<String>,
    /// `N × d`
    pub positive: DenseArray<f32>,
    /// `N × d`
    pub negative: DenseArray<f32>,
    pub prompt_templates: PromptTemplates,
}

impl TextBank {
    pub fn new(
        class_names: Vec<String>,
        positive: DenseArray<f32>,
        negative: DenseArray<f32>,
        prompt_templates: PromptTemplates,
    ) -> Result<Self> {
        let n = class_names.len();
        let (pn, pd) = positive.dims2()?;
        let (nn, nd) = negative.dims2()?;
        if pn != n || nn != n {
            return Err(Error::dim(format!(
                "{n} class names but {pn} positive and {nn} negative rows"
            )));
        }
        if pd != nd {
            return Err(Error::dim("positive and negative widths differ"));
        }
        if !positive.is_finite() || !negative.is_finite() {
            return Err(Error::Degenerate("text features must be finite".into()));
        }
        Ok(Self {
            class_names,
            positive,
            negative,
            prompt_templates,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.positive.shape()[1]
    }

    /// `2N × d`: positives, then negatives.
    pub fn stacked<T: Scalar>(&self) -> DenseArray<T> {
        let vals = self
            .positive
            .values()
            .iter()
            .chain(self.negative.values())
            .map(|&v| T::cast(v as f64))
            .collect();
        DenseArray::from_parts(vec![2 * self.n_classes(), self.dim()], vals)
    }
}

/// Projected text features, row `j` the positive and row `N + j` the
/// negative feature of class `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTextBank<T = f32> {
    pub rows: DenseArray<T>,
}

impl<T: Scalar> ProjectedTextBank<T> {
    pub fn n_classes(&self) -> usize {
        self.rows.shape()[0] / 2
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn positive(&self) -> DenseArray<T> {
        let n = self.n_classes() * self.dim();
        DenseArray::from_parts(
            vec![self.n_classes(), self.dim()],
            self.rows.values()[..n].to_vec(),
        )
    }

    pub fn negative(&self) -> DenseArray<T> {
        let n = self.n_classes() * self.dim();
        DenseArray::from_parts(
            vec![self.n_classes(), self.dim()],
            self.rows.values()[n..].to_vec(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingOrder {
    #[default]
    ProjectThenPool,
    PoolThenProject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T = f32> {
    /// `[in, out]`
    pub weight: DenseArray<T>,
    /// `[out]`
    pub bias: DenseArray<T>,
}

impl<T: Scalar> Linear<T> {
    /// Fan-in scaled uniform weights, zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut XorShift64Star) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| T::cast(rng.uniform(-bound, bound)))
            .collect();
        Self {
            weight: DenseArray::from_parts(vec![fan_in, fan_out], w),
            bias: DenseArray::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Weights of both projectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams<T = f32> {
    pub image: Linear<T>,
    pub text_fc1: Linear<T>,
    pub text_bn: BatchNormState<T>,
    pub text_fc2: Linear<T>,
}

/// Tape handles for the trainable tensors, in [`TRAINABLE_NAMES`] order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: [Var; 8],
}

impl ParamVars {
    fn image_w(&self) -> Var {
        self.vars[0]
    }
    fn image_b(&self) -> Var {
        self.vars[1]
    }
}

/// Draws fresh projector weights from the seeded stream. Draw order: image
/// weight, text fc1 weight, text fc2 weight, each row-major.
pub fn init_projectors(
    d: usize,
    hidden: usize,
    d_prime: usize,
    seed: u64,
) -> Result<ProjectorParams> {
    if d == 0 || hidden == 0 || d_prime == 0 {
        return Err(Error::Config("projector dimensions must be ≥ 1".into()));
    }
    let mut rng = XorShift64Star::new(seed);
    let image = Linear::init(d, d_prime, &mut rng);
    let text_fc1 = Linear::init(d, hidden, &mut rng);
    let text_fc2 = Linear::init(hidden, d_prime, &mut rng);
    Ok(ProjectorParams {
        image,
        text_fc1,
        text_bn: BatchNormState::new(hidden),
        text_fc2,
    })
}

impl<T: Scalar> ProjectorParams<T> {
    pub fn d(&self) -> usize {
        self.image.fan_in()
    }

    pub fn hidden(&self) -> usize {
        self.text_fc1.fan_out()
    }

    pub fn d_prime(&self) -> usize {
        self.image.fan_out()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ProjectorParams<U> {
        ProjectorParams {
            image: self.image.cast(),
            text_fc1: self.text_fc1.cast(),
            text_bn: self.text_bn.cast(),
            text_fc2: self.text_fc2.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.is_finite())
            && self
                .text_bn
                .running_mean
                .iter()
                .chain(&self.text_bn.running_var)
                .all(|v| v.is_finite())
    }

    /// Trainable tensors in [`TRAINABLE_NAMES`] order.
    pub fn trainable(&self) -> [DenseArray<T>; 8] {
        let h = self.hidden();
        [
            self.image.weight.clone(),
            self.image.bias.clone(),
            self.text_fc1.weight.clone(),
            self.text_fc1.bias.clone(),
            DenseArray::from_parts(vec![h], self.text_bn.gamma.clone()),
            DenseArray::from_parts(vec![h], self.text_bn.beta.clone()),
            self.text_fc2.weight.clone(),
            self.text_fc2.bias.clone(),
        ]
    }

    /// Mutable views of the trainable tensors in [`TRAINABLE_NAMES`] order.
    pub fn trainable_mut(&mut self) -> [&mut [T]; 8] {
        [
            self.image.weight.values_mut(),
            self.image.bias.values_mut(),
            self.text_fc1.weight.values_mut(),
            self.text_fc1.bias.values_mut(),
            &mut self.text_bn.gamma,
            &mut self.text_bn.beta,
            self.text_fc2.weight.values_mut(),
            self.text_fc2.bias.values_mut(),
        ]
    }

    /// Rebuilds parameters from tensors in [`TRAINABLE_NAMES`] order,
    /// keeping this instance's running statistics.
    pub fn with_trainable(&self, tensors: &[DenseArray<T>]) -> Result<Self> {
        if tensors.len() != 8 {
            return Err(Error::dim("expected 8 trainable tensors"));
        }
        let mut out = self.clone();
        for (dst, src) in out.trainable_mut().into_iter().zip(tensors) {
            if dst.len() != src.len() {
                return Err(Error::dim("trainable tensor size changed"));
            }
            dst.copy_from_slice(src.values());
        }
        Ok(out)
    }

    /// Binds the trainable tensors as tape parameters.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        let t = self.trainable();
        let vars = t.map(|a| tape.param(a));
        ParamVars { vars }
    }

    /// Binds the trainable tensors as tape constants (inference only).
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        let t = self.trainable();
        let vars = t.map(|a| tape.constant(a));
        ParamVars { vars }
    }
}

/// Image projector on a stack of locations `[rows, d]` → unit rows `[rows, d′]`.
pub fn image_forward<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
    let y = tape.matmul(x, vars.image_w())?;
    let y = tape.add_row_bias(y, vars.image_b())?;
    tape.l2_normalize(y, 1)
}

/// Text projector on `[rows, d]` → unit rows `[rows, d′]`. In train mode the
/// batch statistics of the hidden layer are returned for the caller to fold
/// into the running estimates.
pub fn text_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    bn: &BatchNormState<T>,
    x: Var,
    mode: NormMode,
) -> Result<(Var, Option<ColumnStats>)> {
    let [_, _, w1, b1, gamma, beta, w2, b2] = vars.vars;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row_bias(h, b1)?;
    let (h, stats) = match mode {
        NormMode::Train => {
            let (h, stats) = tape.standardize_columns(h, 0, bn.epsilon)?;
            (h, Some(stats))
        }
        NormMode::Eval => {
            let (scale, shift) = bn.eval_affine();
            (tape.column_affine(h, &scale, &shift)?, None)
        }
    };
    let h = tape.mul_columns(h, gamma)?;
    let h = tape.add_row_bias(h, beta)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, w2)?;
    let y = tape.add_row_bias(y, b2)?;
    Ok((tape.l2_normalize(y, 1)?, stats))
}

pub(crate) fn grid_rows<T: Scalar>(grid: &FeatureGrid) -> DenseArray<T> {
    DenseArray::from_parts(
        vec![grid.locations(), grid.channels],
        grid.values.iter().map(|&v| T::cast(v as f64)).collect(),
    )
}

/// Projects every location of `grid`; output shape `[H, W, d′]` with unit
/// feature vectors.
pub fn project_image<T: Scalar>(
    grid: &FeatureGrid,
    params: &ProjectorParams<T>,
) -> Result<DenseArray<T>> {
    if grid.channels != params.d() {
        return Err(Error::dim(format!(
            "grid has {} channels, projector expects {}",
            grid.channels,
            params.d()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let x = tape.constant(grid_rows(grid));
    let y = image_forward(&mut tape, &vars, x)?;
    let out = tape.value(y).clone();
    out.reshape(vec![grid.height, grid.width, params.d_prime()])
}

/// Projects the stacked text bank. Train mode normalizes with the statistics
/// of this bank but does not touch `params`' running statistics.
pub fn project_text<T: Scalar>(
    bank: &TextBank,
    params: &ProjectorParams<T>,
    mode: NormMode,
) -> Result<ProjectedTextBank<T>> {
    if bank.dim() != params.d() {
        return Err(Error::dim(format!(
            "text bank width {} but projector expects {}",
            bank.dim(),
            params.d()
        )));
    }
    project_text_rows(&bank.stacked(), params, mode).map(|rows| ProjectedTextBank { rows })
}

pub(crate) fn project_text_rows<T: Scalar>(
    rows: &DenseArray<T>,
    params: &ProjectorParams<T>,
    mode: NormMode,
) -> Result<DenseArray<T>> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let x = tape.constant(rows.clone());
    let (y, _) = text_forward(&mut tape, &vars, &params.text_bn, x, mode)?;
    Ok(tape.value(y).clone())
}
