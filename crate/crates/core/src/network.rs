//! Differentiable model: per-view graph-convolutional encoders on observed
//! rows, mask-informed feature fusion into a view-common representation,
//! per-view fully connected decoders, and an orthonormal cluster projection.
//!
//! Gradients are computed by hand-rolled reverse passes; every forward
//! function has a cached twin that retains exactly what its backward needs.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ObservedPartition;
use crate::error::{Error, Result};
use crate::graph::Propagate;
use crate::scalar::Scalar;

/// Threshold below which a diagonal entry of R marks the projection as rank
/// deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply<T: Scalar>(self, z: &Array2<T>) -> Array2<T> {
        match self {
            Activation::Relu => z.mapv(|x| x.max(T::zero())),
            Activation::None => z.clone(),
        }
    }

    fn backward<T: Scalar>(self, preact: &Array2<T>, d_out: &Array2<T>) -> Array2<T> {
        match self {
            Activation::Relu => {
                let mut d = d_out.clone();
                d.zip_mut_with(preact, |g, &z| {
                    if z <= T::zero() {
                        *g = T::zero();
                    }
                });
                d
            }
            Activation::None => d_out.clone(),
        }
    }
}

/// One affine layer.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let weight = Array2::from_shape_fn((rows, cols), |_| T::of(rng.gen_range(-limit..limit)));
        Linear {
            weight,
            bias: Array1::zeros(cols),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }
}

/// Layer widths of the model. `hidden` lists encoder widths from the first
/// hidden layer to the latent dimension; decoders mirror it back to each
/// view's input dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    pub view_dims: Vec<usize>,
    pub hidden: Vec<usize>,
    pub n_clusters: usize,
}

impl ModelDims {
    /// Default widths: encoders D-196-128-64, decoders 64-128-196-D.
    pub fn standard(view_dims: Vec<usize>, n_clusters: usize) -> Self {
        ModelDims {
            view_dims,
            hidden: vec![196, 128, 64],
            n_clusters,
        }
    }

    pub fn latent(&self) -> usize {
        *self.hidden.last().expect("at least one hidden width")
    }

    fn encoder_widths(&self, v: usize) -> Vec<usize> {
        let mut w = vec![self.view_dims[v]];
        w.extend_from_slice(&self.hidden);
        w
    }

    fn decoder_widths(&self, v: usize) -> Vec<usize> {
        let mut w: Vec<usize> = self.hidden.iter().rev().copied().collect();
        w.push(self.view_dims[v]);
        w
    }
}

/// All trainable parameters. Also reused as the container for gradients and
/// optimizer moments, which share its exact tensor layout.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub encoders: Vec<Vec<Linear<T>>>,
    pub decoders: Vec<Vec<Linear<T>>>,
    pub projection: Linear<T>,
    pub use_bias: bool,
    pub seed: u64,
    pub epoch: usize,
}

impl<T: Scalar> ModelState<T> {
    /// Seeded uniform Glorot initialization; biases start at zero.
    pub fn init(dims: &ModelDims, seed: u64, use_bias: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        for v in 0..dims.view_dims.len() {
            let widths = dims.encoder_widths(v);
            encoders.push(
                widths
                    .windows(2)
                    .map(|w| Linear::glorot(w[0], w[1], &mut rng))
                    .collect(),
            );
        }
        for v in 0..dims.view_dims.len() {
            let widths = dims.decoder_widths(v);
            decoders.push(
                widths
                    .windows(2)
                    .map(|w| Linear::glorot(w[0], w[1], &mut rng))
                    .collect(),
            );
        }
        let projection = Linear::glorot(dims.latent(), dims.n_clusters, &mut rng);
        ModelState {
            encoders,
            decoders,
            projection,
            use_bias,
            seed,
            epoch: 0,
        }
    }

    pub fn n_views(&self) -> usize {
        self.encoders.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.projection.weight.nrows()
    }

    pub fn n_clusters(&self) -> usize {
        self.projection.weight.ncols()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            view_dims: self.encoders.iter().map(|s| s[0].weight.nrows()).collect(),
            hidden: self.encoders[0].iter().map(|l| l.weight.ncols()).collect(),
            n_clusters: self.n_clusters(),
        }
    }

    /// Same tensor layout, all zeros. Gradient and moment buffers start here.
    pub fn zeros_like(&self) -> Self {
        ModelState {
            encoders: self
                .encoders
                .iter()
                .map(|s| s.iter().map(Linear::zeros_like).collect())
                .collect(),
            decoders: self
                .decoders
                .iter()
                .map(|s| s.iter().map(Linear::zeros_like).collect())
                .collect(),
            projection: self.projection.zeros_like(),
            use_bias: self.use_bias,
            seed: self.seed,
            epoch: self.epoch,
        }
    }

    fn stacks(&self) -> impl Iterator<Item = &Linear<T>> {
        self.encoders
            .iter()
            .flatten()
            .chain(self.decoders.iter().flatten())
            .chain(std::iter::once(&self.projection))
    }

    fn stacks_mut(&mut self) -> impl Iterator<Item = &mut Linear<T>> {
        self.encoders
            .iter_mut()
            .flatten()
            .chain(self.decoders.iter_mut().flatten())
            .chain(std::iter::once(&mut self.projection))
    }

    /// Named tensors in flattening order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push = |name: String, layer: &Linear<T>| {
            out.push((
                format!("{name}.weight"),
                vec![layer.weight.nrows(), layer.weight.ncols()],
                layer.weight.iter().map(|x| x.to_f64_lossy()).collect(),
            ));
            out.push((
                format!("{name}.bias"),
                vec![layer.bias.len()],
                layer.bias.iter().map(|x| x.to_f64_lossy()).collect(),
            ));
        };
        for (v, stack) in self.encoders.iter().enumerate() {
            for (l, layer) in stack.iter().enumerate() {
                push(format!("enc.{v}.{l}"), layer);
            }
        }
        for (v, stack) in self.decoders.iter().enumerate() {
            for (l, layer) in stack.iter().enumerate() {
                push(format!("dec.{v}.{l}"), layer);
            }
        }
        push("proj".into(), &self.projection);
        out
    }

    pub fn flat_len(&self) -> usize {
        self.stacks().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters concatenated in a fixed order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.flat_len());
        for layer in self.stacks() {
            out.extend(layer.weight.iter().copied());
            out.extend(layer.bias.iter().copied());
        }
        out
    }

    /// Inverse of [`ModelState::flatten`].
    pub fn assign_from_flat(&mut self, flat: &[T]) {
        let mut pos = 0;
        for layer in self.stacks_mut() {
            for w in layer.weight.iter_mut() {
                *w = flat[pos];
                pos += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = flat[pos];
                pos += 1;
            }
        }
        assert_eq!(pos, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.stacks()
            .all(|l| l.weight.iter().all(|x| x.is_finite()) && l.bias.iter().all(|x| x.is_finite()))
    }

    /// Write the versioned checkpoint: a text header (shapes, seed, epoch)
    /// followed by raw little-endian f64 tensor data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let tensors = self.named_tensors();
        let mut header = String::new();
        header.push_str("MVCMODEL 1\n");
        header.push_str("scalar f64\n");
        header.push_str(&format!("seed {}\n", self.seed));
        header.push_str(&format!("epoch {}\n", self.epoch));
        header.push_str(&format!("use_bias {}\n", u8::from(self.use_bias)));
        header.push_str(&format!(
            "views {} encoder_layers {} decoder_layers {}\n",
            self.encoders.len(),
            self.encoders[0].len(),
            self.decoders[0].len()
        ));
        for (name, shape, _) in &tensors {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        }
        header.push_str("DATA\n");
        w.write_all(header.as_bytes())
            .map_err(|e| Error::io(path, e))?;
        for (_, _, data) in &tensors {
            for x in data {
                w.write_all(&x.to_le_bytes())
                    .map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a checkpoint written by [`ModelState::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let data_tag = b"DATA\n";
        let split = bytes
            .windows(data_tag.len())
            .position(|w| w == data_tag)
            .ok_or_else(|| Error::ModelFormat("missing DATA separator".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::ModelFormat("header is not UTF-8".into()))?;
        let mut blob = &bytes[split + data_tag.len()..];

        let mut lines = header.lines();
        let magic = lines.next().unwrap_or_default();
        if magic != "MVCMODEL 1" {
            return Err(Error::ModelFormat(format!("unsupported magic '{magic}'")));
        }
        let mut seed = 0u64;
        let mut epoch = 0usize;
        let mut use_bias = true;
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("scalar") => {}
                Some("seed") => {
                    seed = parse_field(parts.next(), "seed")?;
                }
                Some("epoch") => {
                    epoch = parse_field(parts.next(), "epoch")?;
                }
                Some("use_bias") => {
                    let v: u8 = parse_field(parts.next(), "use_bias")?;
                    use_bias = v != 0;
                }
                Some("views") => {}
                Some("tensor") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::ModelFormat("tensor line without name".into()))?;
                    let dims: Vec<usize> = parts
                        .map(|d| {
                            d.parse()
                                .map_err(|_| Error::ModelFormat("bad tensor dim".into()))
                        })
                        .collect::<Result<_>>()?;
                    shapes.push((name.to_string(), dims));
                }
                Some(other) => {
                    return Err(Error::ModelFormat(format!(
                        "unknown header field '{other}'"
                    )));
                }
                None => {}
            }
        }

        let mut read_tensor = |len: usize| -> Result<Vec<T>> {
            let bytes_needed = len * 8;
            if blob.len() < bytes_needed {
                return Err(Error::ModelFormat("tensor data truncated".into()));
            }
            let mut out = Vec::with_capacity(len);
            let mut chunk = [0u8; 8];
            for _ in 0..len {
                blob.read_exact(&mut chunk)
                    .map_err(|_| Error::ModelFormat("tensor data truncated".into()))?;
                out.push(T::of(f64::from_le_bytes(chunk)));
            }
            Ok(out)
        };

        let mut encoders: Vec<Vec<Linear<T>>> = Vec::new();
        let mut decoders: Vec<Vec<Linear<T>>> = Vec::new();
        let mut projection: Option<Linear<T>> = None;
        let mut pending: Option<(String, Array2<T>)> = None;
        for (name, dims) in shapes {
            if name.ends_with(".weight") {
                if dims.len() != 2 {
                    return Err(Error::ModelFormat(format!("weight '{name}' is not 2-d")));
                }
                let data = read_tensor(dims[0] * dims[1])?;
                let w = Array2::from_shape_vec((dims[0], dims[1]), data)
                    .map_err(|e| Error::ModelFormat(e.to_string()))?;
                pending = Some((name.trim_end_matches(".weight").to_string(), w));
            } else if name.ends_with(".bias") {
                let (base, weight) = pending
                    .take()
                    .ok_or_else(|| Error::ModelFormat(format!("bias '{name}' without weight")))?;
                if name.trim_end_matches(".bias") != base {
                    return Err(Error::ModelFormat(format!(
                        "tensor order broken at '{name}'"
                    )));
                }
                let data = read_tensor(dims[0])?;
                let layer = Linear {
                    weight,
                    bias: Array1::from_vec(data),
                };
                let mut fields = base.split('.');
                match fields.next() {
                    Some("enc") => {
                        let v: usize = parse_field(fields.next(), "encoder index")?;
                        if encoders.len() <= v {
                            encoders.resize_with(v + 1, Vec::new);
                        }
                        encoders[v].push(layer);
                    }
                    Some("dec") => {
                        let v: usize = parse_field(fields.next(), "decoder index")?;
                        if decoders.len() <= v {
                            decoders.resize_with(v + 1, Vec::new);
                        }
                        decoders[v].push(layer);
                    }
                    Some("proj") => projection = Some(layer),
                    _ => return Err(Error::ModelFormat(format!("unknown tensor '{base}'"))),
                }
            } else {
                return Err(Error::ModelFormat(format!("unknown tensor '{name}'")));
            }
        }
        let projection =
            projection.ok_or_else(|| Error::ModelFormat("missing projection tensors".into()))?;
        if encoders.is_empty() || decoders.len() != encoders.len() {
            return Err(Error::ModelFormat(
                "inconsistent encoder/decoder stacks".into(),
            ));
        }
        Ok(ModelState {
            encoders,
            decoders,
            projection,
            use_bias,
            seed,
            epoch,
        })
    }
}

fn parse_field<F: std::str::FromStr>(field: Option<&str>, what: &str) -> Result<F> {
    field
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ModelFormat(format!("bad header field '{what}'")))
}

/// One graph-convolution layer: `activation(A_norm . H . W + bias)`.
pub fn gcn_layer<T: Scalar, A: Propagate<T>>(
    h: &Array2<T>,
    a_norm: &A,
    w: &Array2<T>,
    bias: Option<&Array1<T>>,
    activation: Activation,
) -> Array2<T> {
    let mut preact = a_norm.propagate(h).dot(w);
    if let Some(b) = bias {
        preact += b;
    }
    activation.apply(&preact)
}

struct LayerCache<T> {
    /// Matrix that multiplies the weight: `A . H` for graph layers, the layer
    /// input for dense layers.
    prop: Array2<T>,
    preact: Array2<T>,
}

struct StackCache<T> {
    layers: Vec<LayerCache<T>>,
}

fn stack_activation(idx: usize, total: usize) -> Activation {
    if idx + 1 == total {
        Activation::None
    } else {
        Activation::Relu
    }
}

fn encode_cached<T: Scalar, A: Propagate<T>>(
    z: &Array2<T>,
    a_norm: &A,
    stack: &[Linear<T>],
    use_bias: bool,
) -> (Array2<T>, StackCache<T>) {
    let mut h = z.clone();
    let mut layers = Vec::with_capacity(stack.len());
    for (idx, layer) in stack.iter().enumerate() {
        let act = stack_activation(idx, stack.len());
        let prop = a_norm.propagate(&h);
        let mut preact = prop.dot(&layer.weight);
        if use_bias {
            preact += &layer.bias;
        }
        h = act.apply(&preact);
        layers.push(LayerCache { prop, preact });
    }
    (h, StackCache { layers })
}

fn encode_backward<T: Scalar, A: Propagate<T>>(
    a_norm: &A,
    stack: &[Linear<T>],
    cache: &StackCache<T>,
    d_out: &Array2<T>,
    use_bias: bool,
) -> Vec<Linear<T>> {
    let mut grads: Vec<Linear<T>> = stack.iter().map(Linear::zeros_like).collect();
    let mut d_h = d_out.clone();
    for idx in (0..stack.len()).rev() {
        let act = stack_activation(idx, stack.len());
        let lc = &cache.layers[idx];
        let d_pre = act.backward(&lc.preact, &d_h);
        grads[idx].weight = lc.prop.t().dot(&d_pre);
        if use_bias {
            grads[idx].bias = d_pre.sum_axis(Axis(0));
        }
        if idx > 0 {
            // A_norm is symmetric, so the adjoint propagation reuses it.
            d_h = a_norm.propagate(&d_pre.dot(&stack[idx].weight.t()));
        }
    }
    grads
}

/// View-specific encoder: a stack of graph-convolution layers with ReLU on
/// hidden layers and a linear final layer.
pub fn encode_view<T: Scalar, A: Propagate<T>>(
    z: &Array2<T>,
    a_norm: &A,
    stack: &[Linear<T>],
    use_bias: bool,
) -> Array2<T> {
    encode_cached(z, a_norm, stack, use_bias).0
}

fn dense_cached<T: Scalar>(
    input: &Array2<T>,
    stack: &[Linear<T>],
    use_bias: bool,
) -> (Array2<T>, StackCache<T>) {
    let mut h = input.clone();
    let mut layers = Vec::with_capacity(stack.len());
    for (idx, layer) in stack.iter().enumerate() {
        let act = stack_activation(idx, stack.len());
        let prop = h;
        let mut preact = prop.dot(&layer.weight);
        if use_bias {
            preact += &layer.bias;
        }
        h = act.apply(&preact);
        layers.push(LayerCache { prop, preact });
    }
    (h, StackCache { layers })
}

fn dense_backward<T: Scalar>(
    stack: &[Linear<T>],
    cache: &StackCache<T>,
    d_out: &Array2<T>,
    use_bias: bool,
) -> (Vec<Linear<T>>, Array2<T>) {
    let mut grads: Vec<Linear<T>> = stack.iter().map(Linear::zeros_like).collect();
    let mut d_h = d_out.clone();
    for idx in (0..stack.len()).rev() {
        let act = stack_activation(idx, stack.len());
        let lc = &cache.layers[idx];
        let d_pre = act.backward(&lc.preact, &d_h);
        grads[idx].weight = lc.prop.t().dot(&d_pre);
        if use_bias {
            grads[idx].bias = d_pre.sum_axis(Axis(0));
        }
        d_h = d_pre.dot(&stack[idx].weight.t());
    }
    (grads, d_h)
}

/// View-specific decoder: fully connected layers reconstructing the view's
/// observed features from gathered view-common rows.
pub fn decode_view<T: Scalar>(
    f_view: &Array2<T>,
    stack: &[Linear<T>],
    use_bias: bool,
) -> Array2<T> {
    dense_cached(f_view, stack, use_bias).0
}

/// How per-view latents combine into the view-common representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionRule {
    /// Average each sample's latents over the views that observe it.
    Masked,
    /// Ablation: zero-fill missing latents and divide by the view count.
    UnmaskedZeroFill,
}

/// Mask-informed feature fusion: row `i` of the output is the mean of that
/// sample's latent rows over its observed views.
pub fn fuse_features<T: Scalar>(
    latents: &[Array2<T>],
    part: &ObservedPartition,
    mask: &Array2<u8>,
) -> Result<Array2<T>> {
    fuse_features_with(latents, part, mask, FusionRule::Masked)
}

/// Feature fusion under an explicit rule; the unmasked rule backs the
/// fusion-ablation variant.
pub fn fuse_features_with<T: Scalar>(
    latents: &[Array2<T>],
    part: &ObservedPartition,
    mask: &Array2<u8>,
    rule: FusionRule,
) -> Result<Array2<T>> {
    let n = mask.nrows();
    let n_views = mask.ncols();
    if latents.len() != n_views {
        return Err(Error::ShapeMismatch(format!(
            "{} latent blocks for {n_views} views",
            latents.len()
        )));
    }
    let latent_dim = latents.first().map(|h| h.ncols()).unwrap_or(0);
    for (v, h) in latents.iter().enumerate() {
        if h.nrows() != part.n_observed(v) {
            return Err(Error::ShapeMismatch(format!(
                "view {v} latents have {} rows, expected {}",
                h.nrows(),
                part.n_observed(v)
            )));
        }
        if h.ncols() != latent_dim {
            return Err(Error::ShapeMismatch(
                "latent widths differ across views".into(),
            ));
        }
    }
    let mut f = Array2::zeros((n, latent_dim));
    for (v, h) in latents.iter().enumerate() {
        for (row, &i) in part.observed(v).iter().enumerate() {
            let mut out = f.row_mut(i);
            out += &h.row(row);
        }
    }
    for i in 0..n {
        let count = match rule {
            FusionRule::Masked => {
                let c = (0..n_views).filter(|&v| mask[[i, v]] == 1).count();
                if c == 0 {
                    return Err(Error::InvalidMask(format!(
                        "sample {i} is missing in every view"
                    )));
                }
                c
            }
            FusionRule::UnmaskedZeroFill => n_views,
        };
        let scale = T::one() / T::of(count as f64);
        let mut row = f.row_mut(i);
        row *= scale;
    }
    Ok(f)
}

fn fuse_backward<T: Scalar>(
    d_f: &Array2<T>,
    part: &ObservedPartition,
    mask: &Array2<u8>,
    rule: FusionRule,
) -> Vec<Array2<T>> {
    let n_views = mask.ncols();
    let mut d_latents = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let obs = part.observed(v);
        let mut d_h = Array2::zeros((obs.len(), d_f.ncols()));
        for (row, &i) in obs.iter().enumerate() {
            let count = match rule {
                FusionRule::Masked => (0..n_views).filter(|&w| mask[[i, w]] == 1).count(),
                FusionRule::UnmaskedZeroFill => n_views,
            };
            let scale = T::one() / T::of(count as f64);
            let mut out = d_h.row_mut(row);
            out.assign(&d_f.row(i));
            out *= scale;
        }
        d_latents.push(d_h);
    }
    d_latents
}

/// Thin QR factorization by Householder reflections. Returns `(Q, R)` with
/// `Q` having orthonormal columns and `R` upper triangular with a strictly
/// positive diagonal. Fails when a diagonal entry falls below
/// [`RANK_TOLERANCE`].
pub fn thin_qr<T: Scalar>(a: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
    let (n, c) = a.dim();
    if n < c {
        return Err(Error::ShapeMismatch(format!(
            "thin QR needs at least as many rows as columns, got {n}x{c}"
        )));
    }
    let tol = T::of(RANK_TOLERANCE);
    let mut m = a.clone();
    // Householder vectors, one per column, each of length n - j.
    let mut reflectors: Vec<(Array1<T>, T)> = Vec::with_capacity(c);
    for j in 0..c {
        let mut v: Array1<T> = m.slice(ndarray::s![j.., j]).to_owned();
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm < tol {
            return Err(Error::DegenerateProjection {
                index: j,
                value: norm.to_f64_lossy(),
                threshold: RANK_TOLERANCE,
            });
        }
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vtv = v.iter().map(|&x| x * x).sum::<T>();
        let beta = (T::one() + T::one()) / vtv;
        // Reflect the trailing block.
        for col in j..c {
            let mut s = T::zero();
            for r in j..n {
                s += v[r - j] * m[[r, col]];
            }
            let bs = beta * s;
            for r in j..n {
                let upd = bs * v[r - j];
                m[[r, col]] -= upd;
            }
        }
        m[[j, j]] = alpha;
        for r in j + 1..n {
            m[[r, j]] = T::zero();
        }
        reflectors.push((v, beta));
    }

    let mut r = Array2::zeros((c, c));
    for i in 0..c {
        for j in i..c {
            r[[i, j]] = m[[i, j]];
        }
    }

    // Q = H_0 ... H_{c-1} applied to the first c columns of the identity.
    let mut q = Array2::zeros((n, c));
    for j in 0..c {
        q[[j, j]] = T::one();
    }
    for j in (0..c).rev() {
        let (v, beta) = &reflectors[j];
        for col in 0..c {
            let mut s = T::zero();
            for row in j..n {
                s += v[row - j] * q[[row, col]];
            }
            let bs = *beta * s;
            for row in j..n {
                let upd = bs * v[row - j];
                q[[row, col]] -= upd;
            }
        }
    }

    // Fix signs so the diagonal of R is positive; the factorization is then
    // unique and the derivative formula applies.
    for j in 0..c {
        if r[[j, j]] < T::zero() {
            for col in j..c {
                r[[j, col]] = -r[[j, col]];
            }
            for row in 0..n {
                q[[row, j]] = -q[[row, j]];
            }
        }
        if r[[j, j]] < tol {
            return Err(Error::DegenerateProjection {
                index: j,
                value: r[[j, j]].to_f64_lossy(),
                threshold: RANK_TOLERANCE,
            });
        }
    }
    Ok((q, r))
}

/// Adjoint of the thin QR map `A -> Q`: given the loss gradient with respect
/// to `Q`, produce the gradient with respect to `A`.
pub fn qr_backward<T: Scalar>(q: &Array2<T>, r: &Array2<T>, d_q: &Array2<T>) -> Array2<T> {
    let c = r.nrows();
    // m = -dQ^T Q, then keep its lower triangle mirrored onto the upper one.
    let m = -d_q.t().dot(q);
    let mut sym = Array2::zeros((c, c));
    for i in 0..c {
        sym[[i, i]] = m[[i, i]];
        for j in 0..i {
            sym[[i, j]] = m[[i, j]];
            sym[[j, i]] = m[[i, j]];
        }
    }
    let b = d_q + &q.dot(&sym);
    // Solve X R^T = B by back-substitution on each row.
    let n = b.nrows();
    let mut x = Array2::zeros((n, c));
    for row in 0..n {
        for j in (0..c).rev() {
            let mut s = b[[row, j]];
            for l in j + 1..c {
                s -= x[[row, l]] * r[[j, l]];
            }
            x[[row, j]] = s / r[[j, j]];
        }
    }
    x
}

/// Cluster projection: a single linear layer followed by orthogonalization,
/// so the indicator has orthonormal columns.
pub fn project_clusters<T: Scalar>(
    f: &Array2<T>,
    proj: &Linear<T>,
    use_bias: bool,
) -> Result<Array2<T>> {
    Ok(project_cached(f, proj, use_bias)?.0)
}

struct ProjCache<T> {
    y: Array2<T>,
    r: Array2<T>,
}

fn project_cached<T: Scalar>(
    f: &Array2<T>,
    proj: &Linear<T>,
    use_bias: bool,
) -> Result<(Array2<T>, ProjCache<T>)> {
    let mut p = f.dot(&proj.weight);
    if use_bias {
        p += &proj.bias;
    }
    let (q, r) = thin_qr(&p)?;
    Ok((q.clone(), ProjCache { y: q, r }))
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardPass<T> {
    /// Per-view latents on observed rows.
    pub latents: Vec<Array2<T>>,
    /// View-common representation, one row per sample.
    pub f: Array2<T>,
    /// Per-view reconstructions of the observed feature rows.
    pub recons: Vec<Array2<T>>,
    /// Orthonormal cluster indicator, present when requested.
    pub y: Option<Array2<T>>,
    enc_caches: Vec<StackCache<T>>,
    dec_caches: Vec<StackCache<T>>,
    proj_cache: Option<ProjCache<T>>,
    fusion: FusionRule,
}

/// Run the whole model: encode each view's observed rows, fuse into the
/// view-common representation, decode per view, and (optionally) project to
/// the orthonormal cluster indicator.
pub fn forward_model<T: Scalar, A: Propagate<T>>(
    state: &ModelState<T>,
    z_views: &[Array2<T>],
    a_norms: &[A],
    part: &ObservedPartition,
    mask: &Array2<u8>,
    fusion: FusionRule,
    with_projection: bool,
) -> Result<ForwardPass<T>> {
    let n_views = state.n_views();
    if z_views.len() != n_views || a_norms.len() != n_views {
        return Err(Error::ShapeMismatch(
            "views/graphs do not match the model".into(),
        ));
    }
    let mut latents = Vec::with_capacity(n_views);
    let mut enc_caches = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let (h, cache) =
            encode_cached(&z_views[v], &a_norms[v], &state.encoders[v], state.use_bias);
        latents.push(h);
        enc_caches.push(cache);
    }
    let f = fuse_features_with(&latents, part, mask, fusion)?;
    let mut recons = Vec::with_capacity(n_views);
    let mut dec_caches = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let f_view = crate::dataset::gather_rows(&f, part.observed(v));
        let (recon, cache) = dense_cached(&f_view, &state.decoders[v], state.use_bias);
        recons.push(recon);
        dec_caches.push(cache);
    }
    let proj_cache = if with_projection {
        let (_, cache) = project_cached(&f, &state.projection, state.use_bias)?;
        Some(cache)
    } else {
        None
    };
    Ok(ForwardPass {
        latents,
        f,
        recons,
        y: proj_cache.as_ref().map(|c| c.y.clone()),
        enc_caches,
        dec_caches,
        proj_cache,
        fusion,
    })
}

/// Reverse pass: map loss gradients on the reconstructions and the cluster
/// indicator to gradients on every parameter tensor. Returns them in a
/// `ModelState`-shaped container.
pub fn backward_model<T: Scalar, A: Propagate<T>>(
    state: &ModelState<T>,
    pass: &ForwardPass<T>,
    a_norms: &[A],
    part: &ObservedPartition,
    mask: &Array2<u8>,
    d_recons: Option<&[Array2<T>]>,
    d_y: Option<&Array2<T>>,
) -> Result<ModelState<T>> {
    let n_views = state.n_views();
    let mut grads = state.zeros_like();
    let mut d_f: Array2<T> = Array2::zeros(pass.f.dim());

    if let Some(d_recons) = d_recons {
        if d_recons.len() != n_views {
            return Err(Error::ShapeMismatch(
                "reconstruction gradients per view".into(),
            ));
        }
        for (v, d_recon) in d_recons.iter().enumerate() {
            let (g, d_fview) = dense_backward(
                &state.decoders[v],
                &pass.dec_caches[v],
                d_recon,
                state.use_bias,
            );
            grads.decoders[v] = g;
            for (row, &i) in part.observed(v).iter().enumerate() {
                let mut out = d_f.row_mut(i);
                out += &d_fview.row(row);
            }
        }
    }

    if let Some(d_y) = d_y {
        let cache = pass
            .proj_cache
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("projection gradient without projection".into()))?;
        let d_p = qr_backward(&cache.y, &cache.r, d_y);
        grads.projection.weight = pass.f.t().dot(&d_p);
        if state.use_bias {
            grads.projection.bias = d_p.sum_axis(Axis(0));
        }
        d_f += &d_p.dot(&state.projection.weight.t());
    }

    let d_latents = fuse_backward(&d_f, part, mask, pass.fusion);
    for v in 0..n_views {
        grads.encoders[v] = encode_backward(
            &a_norms[v],
            &state.encoders[v],
            &pass.enc_caches[v],
            &d_latents[v],
            state.use_bias,
        );
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_error};
    use ndarray::array;

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gcn_layer_with_identity_graph_is_affine() {
        let h = rand_mat(5, 3, 1);
        let w = rand_mat(3, 4, 2);
        let eye: Array2<f64> = Array2::eye(5);
        let out = gcn_layer(&h, &eye, &w, None, Activation::None);
        let direct = h.dot(&w);
        assert!(out
            .iter()
            .zip(direct.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn gcn_layer_with_identity_weight_propagates() {
        let h = rand_mat(4, 4, 3);
        let a = rand_mat(4, 4, 4);
        let w: Array2<f64> = Array2::eye(4);
        let out = gcn_layer(&h, &a, &w, None, Activation::None);
        let direct = a.dot(&h);
        assert!(out
            .iter()
            .zip(direct.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn gcn_layer_hand_case() {
        // 3-node path graph, 2-regular after symmetrization of the middle.
        let a = array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let h = array![[1.0], [2.0], [-1.0]];
        let w = array![[2.0]];
        let out = gcn_layer(&h, &a, &w, None, Activation::Relu);
        // A.H = [2, 0, 2]; times W = [4, 0, 4]; relu keeps all.
        assert_eq!(out, array![[4.0], [0.0], [4.0]]);
    }

    #[test]
    fn encoder_identity_graph_reduces_to_mlp() {
        let dims = ModelDims {
            view_dims: vec![4],
            hidden: vec![6, 5, 3],
            n_clusters: 2,
        };
        let state = ModelState::<f64>::init(&dims, 7, true);
        let z = rand_mat(8, 4, 5);
        let eye: Array2<f64> = Array2::eye(8);
        let h = encode_view(&z, &eye, &state.encoders[0], true);
        // Manual MLP.
        let mut expect = z.clone();
        for (idx, layer) in state.encoders[0].iter().enumerate() {
            let mut pre = expect.dot(&layer.weight);
            pre += &layer.bias;
            expect = stack_activation(idx, 3).apply(&pre);
        }
        assert!(h
            .iter()
            .zip(expect.iter())
            .all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(h.dim(), (8, 3));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let dims = ModelDims {
            view_dims: vec![4],
            hidden: vec![5, 3],
            n_clusters: 2,
        };
        let mut state = ModelState::<f64>::init(&dims, 11, true);
        let z = rand_mat(6, 4, 6);
        let graph = {
            let g = crate::graph::adaptive_knn_graph(&rand_mat(6, 2, 8), 2).unwrap();
            crate::graph::gcn_normalize(&g.weights)
        };

        // Loss: sum of the latent matrix.
        let (h, cache) = encode_cached(&z, &graph, &state.encoders[0], true);
        let d_out = Array2::ones(h.dim());
        let grads = encode_backward(&graph, &state.encoders[0], &cache, &d_out, true);

        let flat: Vec<f64> = state.encoders[0]
            .iter()
            .flat_map(|l| l.weight.iter().copied().chain(l.bias.iter().copied()))
            .collect();
        let z2 = z.clone();
        let graph2 = graph.clone();
        let fd = central_diff(
            |theta: &[f64]| {
                let mut pos = 0;
                for layer in state.encoders[0].iter_mut() {
                    for w in layer.weight.iter_mut() {
                        *w = theta[pos];
                        pos += 1;
                    }
                    for b in layer.bias.iter_mut() {
                        *b = theta[pos];
                        pos += 1;
                    }
                }
                encode_view(&z2, &graph2, &state.encoders[0], true).sum()
            },
            &flat,
            1e-5,
        );
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|l| l.weight.iter().copied().chain(l.bias.iter().copied()))
            .collect();
        assert!(max_rel_error(&analytic, &fd, 1e-6) < 1e-4);
    }

    #[test]
    fn fusion_single_observed_view_copies_row() {
        let h0 = array![[1.0, 2.0]];
        let h1 = array![[5.0, 6.0], [7.0, 8.0]];
        let mask = array![[1u8, 1], [0, 1]];
        let part = ObservedPartition::from_mask(&mask);
        let f = fuse_features(&[h0, h1], &part, &mask).unwrap();
        // Sample 1 is observed only in view 1.
        assert_eq!(f.row(1), array![7.0, 8.0].view());
        // Sample 0 averages both views.
        assert_eq!(f.row(0), array![3.0, 4.0].view());
    }

    #[test]
    fn fusion_three_views_partial_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let c: Vec<f64> = (0..4).map(|_| rng.gen()).collect();
        let mask = array![[1u8, 0, 1]];
        let part = ObservedPartition::from_mask(&mask);
        let latents = vec![
            Array2::from_shape_vec((1, 4), a.clone()).unwrap(),
            Array2::zeros((0, 4)),
            Array2::from_shape_vec((1, 4), c.clone()).unwrap(),
        ];
        let f = fuse_features(&latents, &part, &mask).unwrap();
        for j in 0..4 {
            assert!((f[[0, j]] - (a[j] + c[j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_all_ones_mask_is_plain_mean() {
        let h0 = rand_mat(5, 3, 12);
        let h1 = rand_mat(5, 3, 13);
        let mask = Array2::<u8>::ones((5, 2));
        let part = ObservedPartition::from_mask(&mask);
        let f = fuse_features(&[h0.clone(), h1.clone()], &part, &mask).unwrap();
        let mean = (&h0 + &h1) / 2.0;
        assert_eq!(f, mean);
    }

    #[test]
    fn decoder_zero_weights_output_bias() {
        let dims = ModelDims {
            view_dims: vec![3],
            hidden: vec![4, 2],
            n_clusters: 2,
        };
        let mut state = ModelState::<f64>::init(&dims, 3, true);
        for layer in state.decoders[0].iter_mut() {
            layer.weight.fill(0.0);
            layer.bias.fill(0.5);
        }
        let f = rand_mat(4, 2, 14);
        let out = decode_view(&f, &state.decoders[0], true);
        assert_eq!(out.dim(), (4, 3));
        assert!(out.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn qr_produces_orthonormal_columns() {
        for c in 1..=6 {
            let a = rand_mat(20, c, 20 + c as u64);
            let (q, r) = thin_qr(&a).unwrap();
            let qtq = q.t().dot(&q);
            for i in 0..c {
                for j in 0..c {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((qtq[[i, j]] - expect).abs() < 1e-6);
                }
                assert!(r[[i, i]] > 0.0);
            }
            // Q R reproduces the input.
            let qr = q.dot(&r);
            assert!(qr.iter().zip(a.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
        }
    }

    #[test]
    fn qr_single_column_is_normalization() {
        let a: Array2<f64> = array![[3.0], [4.0]];
        let (q, r) = thin_qr(&a).unwrap();
        assert!((q[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((q[[1, 0]] - 0.8).abs() < 1e-12);
        assert!((r[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn qr_rejects_rank_deficiency() {
        let mut a = rand_mat(10, 3, 30);
        let col0 = a.column(0).to_owned();
        a.column_mut(2).assign(&col0);
        assert!(matches!(
            thin_qr(&a),
            Err(Error::DegenerateProjection { .. })
        ));
    }

    #[test]
    fn projection_spans_the_linear_output() {
        let f = rand_mat(20, 8, 31);
        let proj = Linear {
            weight: rand_mat(8, 4, 32),
            bias: Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]),
        };
        let y = project_clusters(&f, &proj, true).unwrap();
        let mut p = f.dot(&proj.weight);
        p += &proj.bias;
        // Compare orthogonal projectors built from both bases.
        let y_proj = y.dot(&y.t());
        let (qp, _) = thin_qr(&p).unwrap();
        let p_proj = qp.dot(&qp.t());
        let diff = (&y_proj - &p_proj)
            .iter()
            .map(|x| x.abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-8, "projector difference {diff}");
    }

    #[test]
    fn qr_backward_matches_finite_differences() {
        let a = rand_mat(7, 3, 33);
        let w = rand_mat(7, 3, 34); // arbitrary loss direction: L = <W, Q>
        let (q, r) = thin_qr(&a).unwrap();
        let d_a = qr_backward(&q, &r, &w);
        let flat: Vec<f64> = a.iter().copied().collect();
        let fd = central_diff(
            |x: &[f64]| {
                let m = Array2::from_shape_vec((7, 3), x.to_vec()).unwrap();
                let (q, _) = thin_qr(&m).unwrap();
                (&q * &w).sum()
            },
            &flat,
            1e-6,
        );
        let analytic: Vec<f64> = d_a.iter().copied().collect();
        assert!(max_rel_error(&analytic, &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn model_roundtrips_through_checkpoint() {
        let dims = ModelDims {
            view_dims: vec![4, 6],
            hidden: vec![5, 3],
            n_clusters: 3,
        };
        let mut state = ModelState::<f64>::init(&dims, 99, true);
        state.epoch = 17;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        state.save(&path).unwrap();
        let loaded = ModelState::<f64>::load(&path).unwrap();
        assert_eq!(loaded.epoch, 17);
        assert_eq!(loaded.seed, 99);
        assert_eq!(loaded.flatten(), state.flatten());
        assert_eq!(loaded.dims(), dims);
    }

    #[test]
    fn flatten_assign_roundtrip() {
        let dims = ModelDims {
            view_dims: vec![3],
            hidden: vec![4, 2],
            n_clusters: 2,
        };
        let state = ModelState::<f64>::init(&dims, 1, true);
        let flat = state.flatten();
        let mut other = state.zeros_like();
        other.assign_from_flat(&flat);
        assert_eq!(other.flatten(), flat);
        assert_eq!(flat.len(), state.flat_len());
    }
}
