//! Layer stacks, Xavier initialization, the classification loss, and a
//! momentum SGD optimizer.

use std::rc::Rc;

use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::util;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    Flatten,
}

impl LayerSpec {
    fn descriptor(&self) -> String {
        match self {
            Self::Dense { input, output } => format!("dense({input},{output})"),
            Self::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                format!("conv2d({in_channels},{out_channels},{kernel},{stride},{padding})")
            }
            Self::Relu => "relu".to_string(),
            Self::Flatten => "flatten".to_string(),
        }
    }

    pub(crate) fn parse(text: &str) -> Result<Self> {
        let bad = || Error::FieldMismatch { field: "layer".into(), detail: text.to_string() };
        if text == "relu" {
            return Ok(Self::Relu);
        }
        if text == "flatten" {
            return Ok(Self::Flatten);
        }
        let (name, rest) = text.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        let nums: Vec<usize> = args
            .split(',')
            .map(|a| a.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (name, nums.as_slice()) {
            ("dense", [i, o]) => Ok(Self::Dense { input: *i, output: *o }),
            ("conv2d", [ic, oc, k, s, p]) => Ok(Self::Conv2d {
                in_channels: *ic,
                out_channels: *oc,
                kernel: *k,
                stride: *s,
                padding: *p,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    XavierUniform,
}

#[derive(Debug, Clone, Copy)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    pub fn xavier(seed: u64) -> Self {
        Self { scheme: InitScheme::XavierUniform, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f64, momentum: f64, batch_size: usize) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {learning_rate} must be > 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} must be in [0, 1)")));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self { kind: OptimizerKind::Sgd, learning_rate, momentum, batch_size })
    }
}

/// Shape of the value flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Image { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Stage {
    fn describe(self) -> String {
        match self {
            Self::Image { c, h, w } => format!("image {c}x{h}x{w}"),
            Self::Flat(d) => format!("flat {d}"),
        }
    }
}

/// An ordered layer stack with its named parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    params: Vec<(String, Tensor)>,
    num_classes: usize,
    arch_id: String,
}

fn chain(input_shape: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<Stage>> {
    let [c, h, w] = input_shape;
    let mut stages = vec![Stage::Image { c, h, w }];
    for (i, layer) in layers.iter().enumerate() {
        let cur = *stages.last().unwrap();
        let mismatch = |expected: String| {
            Error::InvalidArgument(format!(
                "layer {} ({}) expects {}, but receives {}",
                i,
                layer.descriptor(),
                expected,
                cur.describe()
            ))
        };
        let next = match (layer, cur) {
            (LayerSpec::Dense { input, output }, Stage::Flat(d)) => {
                if d != *input {
                    return Err(mismatch(format!("flat {input}")));
                }
                Stage::Flat(*output)
            }
            // A dense layer directly on an image input consumes the
            // flattened pixels; row-major layout makes this a no-op.
            (LayerSpec::Dense { input, output }, Stage::Image { c, h, w }) => {
                if c * h * w != *input {
                    return Err(mismatch(format!("flat {input}")));
                }
                Stage::Flat(*output)
            }
            (LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding }, Stage::Image { c, h, w }) => {
                if c != *in_channels {
                    return Err(mismatch(format!("image with {in_channels} channels")));
                }
                if *stride == 0 || *kernel == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "layer {i}: kernel and stride must be positive"
                    )));
                }
                if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                    return Err(mismatch(format!("image at least {kernel}x{kernel} after padding")));
                }
                Stage::Image {
                    c: *out_channels,
                    h: (h + 2 * padding - kernel) / stride + 1,
                    w: (w + 2 * padding - kernel) / stride + 1,
                }
            }
            (LayerSpec::Conv2d { .. }, Stage::Flat(_)) => {
                return Err(mismatch("an image input".to_string()));
            }
            (LayerSpec::Relu, s) => s,
            (LayerSpec::Flatten, Stage::Image { c, h, w }) => Stage::Flat(c * h * w),
            (LayerSpec::Flatten, Stage::Flat(d)) => Stage::Flat(d),
        };
        stages.push(next);
    }
    Ok(stages)
}

pub fn arch_descriptor(input_shape: [usize; 3], layers: &[LayerSpec]) -> String {
    let mut parts = vec![format!("input={}x{}x{}", input_shape[0], input_shape[1], input_shape[2])];
    parts.extend(layers.iter().map(LayerSpec::descriptor));
    parts.join(";")
}

pub(crate) fn parse_arch_descriptor(text: &str) -> Result<([usize; 3], Vec<LayerSpec>)> {
    let mut parts = text.split(';');
    let head = parts.next().unwrap_or_default();
    let dims = head
        .strip_prefix("input=")
        .ok_or_else(|| Error::FieldMismatch { field: "arch".into(), detail: text.to_string() })?;
    let nums: Vec<usize> = dims
        .split('x')
        .map(|d| d.parse().map_err(|_| Error::FieldMismatch { field: "arch input".into(), detail: dims.to_string() }))
        .collect::<Result<_>>()?;
    if nums.len() != 3 {
        return Err(Error::FieldMismatch { field: "arch input".into(), detail: dims.to_string() });
    }
    let layers: Vec<LayerSpec> = parts.map(LayerSpec::parse).collect::<Result<_>>()?;
    Ok(([nums[0], nums[1], nums[2]], layers))
}

fn arch_hash(descriptor: &str) -> String {
    let digest = Sha256::digest(descriptor.as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Build a model with Xavier-uniform weights and zero biases.
pub fn build_model(input_shape: [usize; 3], layers: Vec<LayerSpec>, init: InitSpec) -> Result<Model> {
    let stages = chain(input_shape, &layers)?;
    let num_classes = match *stages.last().unwrap() {
        Stage::Flat(k) if k >= 2 => k,
        Stage::Flat(k) => {
            return Err(Error::InvalidArgument(format!("model must emit >= 2 logits, got {k}")))
        }
        Stage::Image { .. } if layers.is_empty() => {
            // A parameterless stack (e.g. relu-only) is legal for tests; its
            // "logit" width is the flattened input.
            input_shape.iter().product()
        }
        Stage::Image { c, h, w } => c * h * w,
    };

    let InitScheme::XavierUniform = init.scheme;
    let mut rng = util::rng_from_seed(init.seed);
    let mut params = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { input, output } => {
                let bound = (6.0 / (input + output) as f64).sqrt();
                let data = (0..input * output)
                    .map(|_| util::uniform_in(&mut rng, -bound, bound))
                    .collect();
                params.push((format!("layer{i}.weight"), Tensor::new(vec![*input, *output], data)?));
                params.push((format!("layer{i}.bias"), Tensor::zeros(vec![*output])));
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel * kernel;
                let fan_out = out_channels * kernel * kernel;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..out_channels * fan_in)
                    .map(|_| util::uniform_in(&mut rng, -bound, bound))
                    .collect();
                params.push((
                    format!("layer{i}.weight"),
                    Tensor::new(vec![*out_channels, *in_channels, *kernel, *kernel], data)?,
                ));
                params.push((format!("layer{i}.bias"), Tensor::zeros(vec![*out_channels])));
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
    }
    let descriptor = arch_descriptor(input_shape, &layers);
    Ok(Model {
        input_shape,
        layers,
        params,
        num_classes,
        arch_id: arch_hash(&descriptor),
    })
}

impl Model {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn arch_descriptor(&self) -> String {
        arch_descriptor(self.input_shape, &self.layers)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replace the parameter store; names and shapes must match.
    pub fn set_params(&mut self, params: Vec<(String, Tensor)>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((en, ev), (gn, gv)) in self.params.iter().zip(&params) {
            if en != gn {
                return Err(Error::InvalidArgument(format!("parameter {gn} does not match {en}")));
            }
            if ev.shape() != gv.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    lhs: ev.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
        }
        self.params = params;
        Ok(())
    }
}

/// A recorded forward execution: the graph plus handles to the input leaf,
/// every parameter leaf, and the logits.
pub struct ForwardPass {
    pub graph: Graph,
    pub input: Var,
    pub params: Vec<(String, Var)>,
    pub logits: Var,
}

impl ForwardPass {
    pub fn param_vars(&self) -> Vec<&Var> {
        self.params.iter().map(|(_, v)| v).collect()
    }
}

fn check_batch_shape(model: &Model, batch_shape: &[usize]) -> Result<usize> {
    let [c, h, w] = model.input_shape;
    if batch_shape.len() != 4 || batch_shape[1] != c || batch_shape[2] != h || batch_shape[3] != w {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: batch_shape.to_vec(),
            rhs: vec![0, c, h, w],
        });
    }
    Ok(batch_shape[0])
}

/// Apply the layer stack to an already-recorded input using the given
/// parameter variables. Shared by every forward flavor.
fn run_layers(model: &Model, input: &Var, params: &[(String, Var)]) -> Result<Var> {
    let n = input.shape()[0];
    let [c, h, w] = model.input_shape;
    let mut x = input.clone();
    let mut stage = Stage::Image { c, h, w };
    let find = |name: String| -> &Var { &params.iter().find(|(pn, _)| pn == &name).unwrap().1 };
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { input: din, output } => {
                if let Stage::Image { .. } = stage {
                    x = x.reshape(vec![n, *din])?;
                }
                let wvar = find(format!("layer{i}.weight"));
                let bvar = find(format!("layer{i}.bias"));
                x = x.matmul(wvar)?.add(&bvar.broadcast_row(n)?)?;
                stage = Stage::Flat(*output);
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                let Stage::Image { c: sc, h: sh, w: sw } = stage else {
                    return Err(Error::InvalidArgument("conv2d applied to flat stage".into()));
                };
                debug_assert_eq!(sc, *in_channels);
                let wvar = find(format!("layer{i}.weight"));
                let bvar = find(format!("layer{i}.bias"));
                let (y, oh, ow) =
                    conv2d(&x, wvar, bvar, n, sc, sh, sw, *out_channels, *kernel, *stride, *padding)?;
                x = y;
                stage = Stage::Image { c: *out_channels, h: oh, w: ow };
            }
            LayerSpec::Relu => x = x.relu(),
            LayerSpec::Flatten => {
                if let Stage::Image { c, h, w } = stage {
                    x = x.reshape(vec![n, c * h * w])?;
                    stage = Stage::Flat(c * h * w);
                }
            }
        }
    }
    if let Stage::Image { c, h, w } = stage {
        x = x.reshape(vec![n, c * h * w])?;
    }
    Ok(x)
}

/// Run the model on a batch `(N, C, H, W)` on a fresh graph, recording the
/// computation for differentiation with respect to both the input and the
/// parameters.
pub fn forward(model: &Model, batch: &Tensor) -> Result<ForwardPass> {
    check_batch_shape(model, batch.shape())?;
    let graph = Graph::new();
    let input = graph.leaf(batch.clone());
    let params: Vec<(String, Var)> = model
        .params
        .iter()
        .map(|(name, t)| (name.clone(), graph.leaf(t.clone())))
        .collect();
    let logits = run_layers(model, &input, &params)?;
    Ok(ForwardPass { graph, input, params, logits })
}

/// Run the model against an input variable that already lives on a graph,
/// with parameters recorded as detached constants. This is the view an
/// attacker differentiates: gradients flow to the input only.
pub fn forward_with_input(model: &Model, input: &Var) -> Result<Var> {
    check_batch_shape(model, &input.shape())?;
    let g = input.graph().clone();
    let params: Vec<(String, Var)> = model
        .params
        .iter()
        .map(|(name, t)| (name.clone(), g.constant(t.clone())))
        .collect();
    run_layers(model, input, &params)
}

/// Convolution as gather (im2col), matmul, bias, and a permutation back to
/// `(N, OC, OH, OW)`. Every step is a recorded linear or bilinear op, so
/// second derivatives are exact.
#[allow(clippy::too_many_arguments)]
fn conv2d(
    x: &Var,
    weight: &Var,
    bias: &Var,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oc: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<(Var, usize, usize)> {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let cols_w = n * oh * ow;
    let ckk = c * k * k;

    let mut im2col = vec![0i64; ckk * cols_w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                for bi in 0..n {
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as i64 - padding as i64;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as i64 - padding as i64;
                            let col = (bi * oh + oy) * ow + ox;
                            im2col[r * cols_w + col] =
                                if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
                                    -1
                                } else {
                                    (((bi * c + ch) * h) as i64 + iy) * w as i64 + ix
                                };
                        }
                    }
                }
            }
        }
    }
    let cols = x.gather(Rc::new(im2col), vec![ckk, cols_w]);
    let wmat = weight.reshape(vec![oc, ckk])?;
    let out = wmat.matmul(&cols)?.add(&bias.broadcast_col(cols_w)?)?;

    // (OC, N*OH*OW) -> (N, OC, OH, OW)
    let mut perm = vec![0i64; n * oc * oh * ow];
    for bi in 0..n {
        for co in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let t = ((bi * oc + co) * oh + oy) * ow + ox;
                    perm[t] = (co * cols_w + (bi * oh + oy) * ow + ox) as i64;
                }
            }
        }
    }
    Ok((out.gather(Rc::new(perm), vec![n, oc, oh, ow]), oh, ow))
}

/// Mean softmax cross-entropy of a recorded logits batch.
pub fn loss(logits: &Var, labels: &[usize]) -> Result<Var> {
    logits.softmax_cross_entropy(labels)
}

/// Momentum accumulator; zero-initialized, one slot per parameter.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<(String, Tensor)>,
}

impl SgdState {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: model
                .params()
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect(),
        }
    }
}

/// One SGD update: `v <- momentum * v + g`, `theta <- theta - lr * v`.
pub fn sgd_step(
    model: &mut Model,
    grads: &[(String, Tensor)],
    opt: &OptimizerSpec,
    state: &mut SgdState,
) -> Result<()> {
    if grads.len() != model.params.len() {
        return Err(Error::InvalidArgument(format!(
            "gradient set has {} entries, model has {}",
            grads.len(),
            model.params.len()
        )));
    }
    for (((pn, pv), (gn, gv)), (_, vel)) in
        model.params.iter_mut().zip(grads).zip(state.velocity.iter_mut())
    {
        if pn != gn {
            return Err(Error::InvalidArgument(format!("gradient key {gn} does not match {pn}")));
        }
        if pv.shape() != gv.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: pv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        for ((p, g), v) in pv.data_mut().iter_mut().zip(gv.data()).zip(vel.data_mut()) {
            *v = opt.momentum * *v + g;
            *p -= opt.learning_rate * *v;
        }
    }
    Ok(())
}

/// Class predictions by logit argmax; ties break toward the lowest index.
pub fn predict(model: &Model, batch: &Tensor) -> Result<Vec<usize>> {
    let pass = forward(model, batch)?;
    let logits = pass.logits.value();
    let (n, k) = logits.as_rows();
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of argmax-correct predictions over a dataset.
pub fn accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty dataset".into()));
    }
    let mut correct = 0usize;
    let mut at = 0usize;
    while at < dataset.len() {
        let upper = (at + 256).min(dataset.len());
        let idx: Vec<usize> = (at..upper).collect();
        let (batch, labels) = dataset.batch(&idx);
        let preds = predict(model, &batch)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        at = upper;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// The two desk-scale reference stacks used throughout the evaluation
/// harness: a 128-unit MLP and a small two-stage CNN.
pub fn desk_mlp(input_shape: [usize; 3], classes: usize) -> Vec<LayerSpec> {
    let d: usize = input_shape.iter().product();
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { input: d, output: 128 },
        LayerSpec::Relu,
        LayerSpec::Dense { input: 128, output: classes },
    ]
}

pub fn desk_cnn(input_shape: [usize; 3], classes: usize) -> Vec<LayerSpec> {
    let [c, h, w] = input_shape;
    vec![
        LayerSpec::Conv2d { in_channels: c, out_channels: 8, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_channels: 8, out_channels: 16, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Dense { input: 16 * h * w, output: classes },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::graph::grad_check;

    fn dense_model(input: usize, output: usize, seed: u64) -> Model {
        build_model(
            [1, 1, input],
            vec![LayerSpec::Dense { input, output }],
            InitSpec::xavier(seed),
        )
        .unwrap()
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = dense_model(4, 3, 7);
        let b = dense_model(4, 3, 7);
        for ((_, ta), (_, tb)) in a.params().iter().zip(b.params()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn xavier_bound_holds() {
        let m = dense_model(100, 100, 3);
        let bound = (6.0 / 200.0_f64).sqrt();
        let w = m.param("layer0.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        // and the draw actually explores the range
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.5));
    }

    #[test]
    fn relu_only_model_has_no_params() {
        let m = build_model([1, 2, 2], vec![LayerSpec::Relu], InitSpec::xavier(0)).unwrap();
        assert!(m.params().is_empty());
    }

    #[test]
    fn shape_chain_break_names_offending_pair() {
        let err = build_model(
            [1, 2, 2],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 4, output: 8 },
                LayerSpec::Dense { input: 9, output: 2 },
            ],
            InitSpec::xavier(0),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("layer 2") && err.contains("dense(9,2)"), "{err}");
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let mut m = dense_model(3, 3, 0);
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        m.set_params(vec![
            ("layer0.weight".into(), eye),
            ("layer0.bias".into(), Tensor::zeros(vec![3])),
        ])
        .unwrap();
        let x = Tensor::new(vec![2, 1, 1, 3], vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.7]).unwrap();
        let pass = forward(&m, &x).unwrap();
        assert_eq!(pass.logits.value().data(), x.data());
    }

    #[test]
    fn zero_weight_model_gives_uniform_softmax_loss() {
        let mut m = dense_model(4, 5, 0);
        m.set_params(vec![
            ("layer0.weight".into(), Tensor::zeros(vec![4, 5])),
            ("layer0.bias".into(), Tensor::zeros(vec![5])),
        ])
        .unwrap();
        let x = Tensor::new(vec![1, 1, 1, 4], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let pass = forward(&m, &x).unwrap();
        assert!(pass.logits.value().data().iter().all(|&v| v == 0.0));
        let l = loss(&pass.logits, &[2]).unwrap();
        assert!((l.item() - 5.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn one_dense_layer_matches_hand_matmul() {
        let mut m = dense_model(3, 2, 0);
        let w = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![0.5, -0.5]);
        m.set_params(vec![("layer0.weight".into(), w), ("layer0.bias".into(), b)]).unwrap();
        let x = Tensor::new(vec![2, 1, 1, 3], vec![1.0, 0.0, 1.0, 0.5, 0.5, 0.0]).unwrap();
        let pass = forward(&m, &x).unwrap();
        // row0: [1,0,1] -> [1*1+0*3+1*5, 1*2+0*4+1*6] + [0.5,-0.5] = [6.5, 7.5]
        // row1: [.5,.5,0] -> [2.0, 3.0] + bias = [2.5, 2.5]
        assert_eq!(pass.logits.value().data(), &[6.5, 7.5, 2.5, 2.5]);
    }

    #[test]
    fn batch_loss_is_mean_of_per_example_losses() {
        let m = dense_model(3, 2, 11);
        let x1 = Tensor::new(vec![1, 1, 1, 3], vec![0.1, 0.9, 0.4]).unwrap();
        let x2 = Tensor::new(vec![1, 1, 1, 3], vec![0.7, 0.2, 0.5]).unwrap();
        let both = Tensor::new(vec![2, 1, 1, 3], vec![0.1, 0.9, 0.4, 0.7, 0.2, 0.5]).unwrap();
        let l1 = loss(&forward(&m, &x1).unwrap().logits, &[0]).unwrap().item();
        let l2 = loss(&forward(&m, &x2).unwrap().logits, &[1]).unwrap().item();
        let lb = loss(&forward(&m, &both).unwrap().logits, &[0, 1]).unwrap().item();
        assert!((lb - (l1 + l2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_drive_loss_to_zero() {
        let g = crate::graph::Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 2], vec![50.0, -50.0]).unwrap());
        let l = logits.softmax_cross_entropy(&[0]).unwrap();
        assert!(l.item() < 1e-20, "loss {}", l.item());
    }

    #[test]
    fn sgd_single_plain_step() {
        let mut m = dense_model(1, 2, 0);
        m.set_params(vec![
            ("layer0.weight".into(), Tensor::zeros(vec![1, 2])),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ])
        .unwrap();
        let opt = OptimizerSpec::sgd(0.1, 0.0, 1).unwrap();
        let mut state = SgdState::new(&m);
        let grads = vec![
            ("layer0.weight".to_string(), Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()),
            ("layer0.bias".to_string(), Tensor::zeros(vec![2])),
        ];
        sgd_step(&mut m, &grads, &opt, &mut state).unwrap();
        assert_eq!(m.param("layer0.weight").unwrap().data(), &[-0.1, 0.0]);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut m = dense_model(3, 2, 5);
        let before: Vec<Vec<f64>> = m.params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let opt = OptimizerSpec::sgd(0.5, 0.9, 1).unwrap();
        let mut state = SgdState::new(&m);
        let grads: Vec<(String, Tensor)> = m
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        sgd_step(&mut m, &grads, &opt, &mut state).unwrap();
        sgd_step(&mut m, &grads, &opt, &mut state).unwrap();
        for ((_, t), b) in m.params().iter().zip(&before) {
            assert_eq!(t.data(), b.as_slice());
        }
    }

    #[test]
    fn sgd_momentum_two_steps_match_hand_unroll() {
        let mut m = dense_model(1, 2, 0);
        m.set_params(vec![
            ("layer0.weight".into(), Tensor::zeros(vec![1, 2])),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ])
        .unwrap();
        let opt = OptimizerSpec::sgd(0.1, 0.9, 1).unwrap();
        let mut state = SgdState::new(&m);
        let grads = vec![
            ("layer0.weight".to_string(), Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap()),
            ("layer0.bias".to_string(), Tensor::zeros(vec![2])),
        ];
        sgd_step(&mut m, &grads, &opt, &mut state).unwrap();
        sgd_step(&mut m, &grads, &opt, &mut state).unwrap();
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let w = m.param("layer0.weight").unwrap();
        assert!((w.data()[0] - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn sgd_key_mismatch_rejected() {
        let mut m = dense_model(2, 2, 0);
        let opt = OptimizerSpec::sgd(0.1, 0.0, 1).unwrap();
        let mut state = SgdState::new(&m);
        let grads = vec![
            ("nope".to_string(), Tensor::zeros(vec![2, 2])),
            ("layer0.bias".to_string(), Tensor::zeros(vec![2])),
        ];
        assert!(sgd_step(&mut m, &grads, &opt, &mut state).is_err());
    }

    #[test]
    fn accuracy_counts_correct_fraction() {
        // A fixed linear model on 1-pixel images: logit0 = 1 - x, logit1 = x.
        let mut m = dense_model(1, 2, 0);
        m.set_params(vec![
            ("layer0.weight".into(), Tensor::new(vec![1, 2], vec![-1.0, 1.0]).unwrap()),
            ("layer0.bias".into(), Tensor::from_vec(vec![0.5, 0.0])),
        ])
        .unwrap();
        let images = Tensor::new(vec![4, 1, 1, 1], vec![0.0, 1.0, 1.0, 0.9]).unwrap();
        // preds: x=0 -> class0; x=1 -> class1; x=1 -> class1; x=0.9 -> logits (“-0.4”, 0.9) -> class1
        let ds = Dataset::new(images, vec![0, 1, 0, 1], 2, "t").unwrap();
        assert_eq!(accuracy(&m, &ds).unwrap(), 0.75);
    }

    #[test]
    fn accuracy_tie_breaks_to_lowest_class() {
        let mut m = dense_model(1, 2, 0);
        m.set_params(vec![
            ("layer0.weight".into(), Tensor::zeros(vec![1, 2])),
            ("layer0.bias".into(), Tensor::zeros(vec![2])),
        ])
        .unwrap();
        let images = Tensor::new(vec![2, 1, 1, 1], vec![0.3, 0.8]).unwrap();
        let all_zero = Dataset::new(images.clone(), vec![0, 0], 2, "t").unwrap();
        let all_one = Dataset::new(images, vec![1, 1], 2, "t").unwrap();
        assert_eq!(accuracy(&m, &all_zero).unwrap(), 1.0);
        assert_eq!(accuracy(&m, &all_one).unwrap(), 0.0);
    }

    #[test]
    fn empty_dataset_accuracy_is_error() {
        let m = dense_model(1, 2, 0);
        let ds = Dataset::new(Tensor::zeros(vec![0, 1, 1, 1]), vec![], 2, "t").unwrap();
        assert!(accuracy(&m, &ds).is_err());
    }

    #[test]
    fn forward_loss_gradients_pass_grad_check() {
        let ds = gen_synthetic(2, 4, 3, 21).unwrap();
        let (batch, labels) = ds.batch(&[0, 1, 2, 3]);
        let m = build_model([1, 3, 3], desk_mlp([1, 3, 3], 2), InitSpec::xavier(4)).unwrap();
        // w.r.t. the input batch
        let err = grad_check(
            |v| {
                let logits = forward_with_input(&m, v)?;
                loss(&logits, &labels)
            },
            &batch,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "input grad error {err}");
    }

    #[test]
    fn cnn_forward_matches_direct_convolution() {
        let m = build_model(
            [1, 4, 4],
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 32, output: 2 },
            ],
            InitSpec::xavier(8),
        )
        .unwrap();
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let pass = forward(&m, &x).unwrap();

        // Direct dense evaluation of the same conv for one output position.
        let wt = m.param("layer0.weight").unwrap();
        let conv_out = {
            let g = crate::graph::Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.leaf(wt.clone());
            let bv = g.leaf(m.param("layer0.bias").unwrap().clone());
            super::conv2d(&xv, &wv, &bv, 1, 1, 4, 4, 2, 3, 1, 1).unwrap().0.value()
        };
        // (0,0) of channel 0 with zero padding:
        let mut expect = 0.0;
        for ki in 0..3usize {
            for kj in 0..3usize {
                let iy = ki as i64 - 1;
                let ix = kj as i64 - 1;
                if iy >= 0 && ix >= 0 {
                    expect += wt.data()[ki * 3 + kj] * x.data()[(iy * 4 + ix) as usize];
                }
            }
        }
        assert!((conv_out.data()[0] - expect).abs() < 1e-12);
        assert_eq!(pass.logits.value().shape(), &[1, 2]);
    }

    #[test]
    fn cnn_gradients_pass_grad_check() {
        let m = build_model(
            [1, 4, 4],
            vec![
                LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 32, output: 2 },
            ],
            InitSpec::xavier(17),
        )
        .unwrap();
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| (i as f64 * 0.618).sin() * 0.4 + 0.5).collect())
            .unwrap();
        let err = grad_check(
            |v| {
                let logits = forward_with_input(&m, v)?;
                loss(&logits, &[0, 1])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv input grad error {err}");
    }
}
