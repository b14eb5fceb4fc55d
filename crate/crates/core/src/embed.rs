//! Fixed re-ID model: a small differentiable feature extractor with an
//! identity classifier head.
//!
//! Two 3x3 stride-2 conv layers (widths 8 and 16) with ReLU, global average
//! pooling, a linear projection to a 32-dim embedding, L2 normalization, and
//! a classifier matrix on the normalized embedding. All backward passes are
//! written by hand and checked against central differences. After
//! pretraining the net is frozen: backward still propagates gradients to the
//! input crop, but parameters never change.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::grid::Grid2D;
use crate::proxy::classification_loss;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    pub crop_h: usize,
    pub crop_w: usize,
    pub in_channels: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub embed_dim: usize,
    pub n_id: usize,
}

impl EmbedConfig {
    pub fn new(n_id: usize) -> Self {
        EmbedConfig {
            crop_h: 64,
            crop_w: 32,
            in_channels: 3,
            conv1_out: 8,
            conv2_out: 16,
            embed_dim: 32,
            n_id,
        }
    }
}

/// 3x3 convolution, stride 2, padding 1.
#[derive(Debug, Clone, PartialEq)]
struct Conv {
    in_ch: usize,
    out_ch: usize,
    /// Weights indexed as [out][in][ky][kx].
    w: Vec<f64>,
    b: Vec<f64>,
}

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: i64 = 1;

fn conv_out(n: usize) -> usize {
    (n + 2 * PAD as usize - K) / STRIDE + 1
}

impl Conv {
    fn init(in_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_ch * K * K) as f64;
        let s = (1.0 / fan_in).sqrt();
        let w = (0..out_ch * in_ch * K * K)
            .map(|_| rng.range(-s, s))
            .collect();
        Conv {
            in_ch,
            out_ch,
            w,
            b: vec![0.01; out_ch],
        }
    }

    #[inline]
    fn widx(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_ch + ic) * K + ky) * K + kx
    }

    fn forward(&self, input: &Grid2D) -> Grid2D {
        let (rows, cols) = (input.rows(), input.cols());
        let (oh, ow) = (conv_out(rows), conv_out(cols));
        let mut out = Grid2D::zeros(oh, ow, self.out_ch);
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..self.out_ch {
                    let mut acc = self.b[oc];
                    for ky in 0..K {
                        let iy = (oy * STRIDE + ky) as i64 - PAD;
                        if iy < 0 || iy as usize >= rows {
                            continue;
                        }
                        for kx in 0..K {
                            let ix = (ox * STRIDE + kx) as i64 - PAD;
                            if ix < 0 || ix as usize >= cols {
                                continue;
                            }
                            for ic in 0..self.in_ch {
                                acc += self.w[self.widx(oc, ic, ky, kx)]
                                    * input.get(iy as usize, ix as usize, ic);
                            }
                        }
                    }
                    out.set(oy, ox, oc, acc);
                }
            }
        }
        out
    }

    /// Accumulates input and (optionally) parameter gradients for `d_out`.
    /// The refinement hot loop runs with a frozen net and skips the
    /// parameter half entirely.
    fn backward(
        &self,
        input: &Grid2D,
        d_out: &Grid2D,
        d_input: &mut Grid2D,
        mut params: Option<(&mut [f64], &mut [f64])>,
    ) {
        let (rows, cols) = (input.rows(), input.cols());
        for oy in 0..d_out.rows() {
            for ox in 0..d_out.cols() {
                for oc in 0..self.out_ch {
                    let g = d_out.get(oy, ox, oc);
                    if g == 0.0 {
                        continue;
                    }
                    if let Some((_, d_b)) = params.as_mut() {
                        d_b[oc] += g;
                    }
                    for ky in 0..K {
                        let iy = (oy * STRIDE + ky) as i64 - PAD;
                        if iy < 0 || iy as usize >= rows {
                            continue;
                        }
                        for kx in 0..K {
                            let ix = (ox * STRIDE + kx) as i64 - PAD;
                            if ix < 0 || ix as usize >= cols {
                                continue;
                            }
                            for ic in 0..self.in_ch {
                                let wi = self.widx(oc, ic, ky, kx);
                                if let Some((d_w, _)) = params.as_mut() {
                                    d_w[wi] += g * input.get(iy as usize, ix as usize, ic);
                                }
                                d_input.add_at(
                                    iy as usize,
                                    ix as usize,
                                    ic,
                                    g * self.w[wi],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    in_dim: usize,
    out_dim: usize,
    /// Row-major [out][in].
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Linear {
    fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let s = (1.0 / in_dim as f64).sqrt();
        let w = (0..out_dim * in_dim).map(|_| rng.range(-s, s)).collect();
        Linear {
            in_dim,
            out_dim,
            w,
            b: vec![0.0; out_dim],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let mut acc = self.b[o];
                for i in 0..self.in_dim {
                    acc += self.w[o * self.in_dim + i] * x[i];
                }
                acc
            })
            .collect()
    }
}

/// L2-normalized feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNet {
    pub cfg: EmbedConfig,
    conv1: Conv,
    conv2: Conv,
    linear: Linear,
    /// Classifier matrix, row-major [n_id][embed_dim]; applied to the
    /// normalized embedding.
    classifier: Vec<f64>,
    frozen: bool,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Grid2D,
    a1: Grid2D,
    a2: Grid2D,
    pooled: Vec<f64>,
    norm: f64,
    e: Vec<f64>,
}

/// Parameter gradients in declaration order, mirroring the net layout.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub flat: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        ParamGrads { flat: vec![0.0; n] }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.flat.iter_mut().zip(other.flat.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.flat.iter_mut() {
            *v *= s;
        }
    }
}

impl EmbedNet {
    pub fn init(cfg: EmbedConfig, rng: &mut Rng) -> Self {
        let mut rng = rng.derive(0x11ed);
        let conv1 = Conv::init(cfg.in_channels, cfg.conv1_out, &mut rng);
        let conv2 = Conv::init(cfg.conv1_out, cfg.conv2_out, &mut rng);
        let linear = Linear::init(cfg.conv2_out, cfg.embed_dim, &mut rng);
        let s = (1.0 / cfg.embed_dim as f64).sqrt();
        let classifier = (0..cfg.n_id * cfg.embed_dim)
            .map(|_| rng.range(-s, s))
            .collect();
        EmbedNet {
            cfg,
            conv1,
            conv2,
            linear,
            classifier,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn param_count(&self) -> usize {
        self.conv1.w.len()
            + self.conv1.b.len()
            + self.conv2.w.len()
            + self.conv2.b.len()
            + self.linear.w.len()
            + self.linear.b.len()
            + self.classifier.len()
    }

    /// All parameters in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(&self.conv1.w);
        out.extend_from_slice(&self.conv1.b);
        out.extend_from_slice(&self.conv2.w);
        out.extend_from_slice(&self.conv2.b);
        out.extend_from_slice(&self.linear.w);
        out.extend_from_slice(&self.linear.b);
        out.extend_from_slice(&self.classifier);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        };
        take(&mut self.conv1.w);
        take(&mut self.conv1.b);
        take(&mut self.conv2.w);
        take(&mut self.conv2.b);
        take(&mut self.linear.w);
        take(&mut self.linear.b);
        take(&mut self.classifier);
    }

    /// Embedding, identity logits, and the backward cache for one crop.
    pub fn forward(&self, crop: &Grid2D) -> Result<(Embedding, Vec<f64>, ForwardCache)> {
        let expected = (self.cfg.crop_h, self.cfg.crop_w, self.cfg.in_channels);
        if crop.shape() != expected {
            return Err(Error::ShapeMismatch {
                context: "embed forward",
                expected,
                got: crop.shape(),
            });
        }

        let mut a1 = self.conv1.forward(crop);
        relu(&mut a1);
        let mut a2 = self.conv2.forward(&a1);
        relu(&mut a2);

        let spatial = (a2.rows() * a2.cols()) as f64;
        let mut pooled = vec![0.0; self.cfg.conv2_out];
        for r in 0..a2.rows() {
            for c in 0..a2.cols() {
                for ch in 0..self.cfg.conv2_out {
                    pooled[ch] += a2.get(r, c, ch);
                }
            }
        }
        for p in pooled.iter_mut() {
            *p /= spatial;
        }

        let z = self.linear.forward(&pooled);
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-15 {
            return Err(Error::DegenerateEmbedding);
        }
        let e: Vec<f64> = z.iter().map(|v| v / norm).collect();

        let logits: Vec<f64> = (0..self.cfg.n_id)
            .map(|row| {
                let mut acc = 0.0;
                for j in 0..self.cfg.embed_dim {
                    acc += self.classifier[row * self.cfg.embed_dim + j] * e[j];
                }
                acc
            })
            .collect();

        let cache = ForwardCache {
            input: crop.clone(),
            a1,
            a2,
            pooled,
            norm,
            e: e.clone(),
        };
        Ok((Embedding(e), logits, cache))
    }

    /// Gradient of the loss w.r.t. the input crop. Parameters are read-only
    /// here; freezing is about never calling [`apply_param_step`].
    pub fn backward_to_input(
        &self,
        cache: &ForwardCache,
        dl_de: &[f64],
        dl_dlogits: &[f64],
    ) -> Result<Grid2D> {
        self.backward(cache, dl_de, dl_dlogits, None)
    }

    /// Full backward: input gradient plus parameter gradients.
    pub fn backward_with_params(
        &self,
        cache: &ForwardCache,
        dl_de: &[f64],
        dl_dlogits: &[f64],
        grads: &mut ParamGrads,
    ) -> Result<Grid2D> {
        self.backward(cache, dl_de, dl_dlogits, Some(grads))
    }

    fn backward(
        &self,
        cache: &ForwardCache,
        dl_de: &[f64],
        dl_dlogits: &[f64],
        mut grads: Option<&mut ParamGrads>,
    ) -> Result<Grid2D> {
        let d = self.cfg.embed_dim;
        assert_eq!(dl_de.len(), d);
        assert_eq!(dl_dlogits.len(), self.cfg.n_id);

        // Classifier head: logits = C e.
        let mut de = dl_de.to_vec();
        for row in 0..self.cfg.n_id {
            let g = dl_dlogits[row];
            if g == 0.0 {
                continue;
            }
            for j in 0..d {
                de[j] += g * self.classifier[row * d + j];
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let (_, _, _, _, _, _, cls) = self.grad_slices(g);
            for row in 0..self.cfg.n_id {
                let gl = dl_dlogits[row];
                if gl == 0.0 {
                    continue;
                }
                for j in 0..d {
                    cls[row * d + j] += gl * cache.e[j];
                }
            }
        }

        // Normalization: e = z / |z|, so dz = (de - e (e . de)) / |z|.
        let dot: f64 = cache.e.iter().zip(de.iter()).map(|(a, b)| a * b).sum();
        let dz: Vec<f64> = (0..d)
            .map(|j| (de[j] - cache.e[j] * dot) / cache.norm)
            .collect();

        // Linear projection.
        let mut d_pooled = vec![0.0; self.cfg.conv2_out];
        for o in 0..d {
            for i in 0..self.cfg.conv2_out {
                d_pooled[i] += self.linear.w[o * self.cfg.conv2_out + i] * dz[o];
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let (_, _, _, _, lin_w, lin_b, _) = self.grad_slices(g);
            for o in 0..d {
                lin_b[o] += dz[o];
                for i in 0..self.cfg.conv2_out {
                    lin_w[o * self.cfg.conv2_out + i] += dz[o] * cache.pooled[i];
                }
            }
        }

        // Global average pool spreads each channel gradient uniformly.
        let spatial = (cache.a2.rows() * cache.a2.cols()) as f64;
        let mut d_a2 = Grid2D::zeros(cache.a2.rows(), cache.a2.cols(), self.cfg.conv2_out);
        for r in 0..d_a2.rows() {
            for c in 0..d_a2.cols() {
                for ch in 0..self.cfg.conv2_out {
                    let v = d_pooled[ch] / spatial;
                    if cache.a2.get(r, c, ch) > 0.0 {
                        d_a2.set(r, c, ch, v);
                    }
                }
            }
        }

        let mut d_a1 = Grid2D::zeros(cache.a1.rows(), cache.a1.cols(), self.cfg.conv1_out);
        match grads.as_deref_mut() {
            Some(g) => {
                let (_, _, c2w, c2b, _, _, _) = self.grad_slices(g);
                self.conv2
                    .backward(&cache.a1, &d_a2, &mut d_a1, Some((c2w, c2b)));
            }
            None => self.conv2.backward(&cache.a1, &d_a2, &mut d_a1, None),
        }

        // ReLU mask of the first stage.
        for idx in 0..d_a1.data().len() {
            if cache.a1.data()[idx] <= 0.0 {
                d_a1.data_mut()[idx] = 0.0;
            }
        }

        let mut d_input = Grid2D::zeros(
            cache.input.rows(),
            cache.input.cols(),
            self.cfg.in_channels,
        );
        match grads.as_deref_mut() {
            Some(g) => {
                let (c1w, c1b, _, _, _, _, _) = self.grad_slices(g);
                self.conv1
                    .backward(&cache.input, &d_a1, &mut d_input, Some((c1w, c1b)));
            }
            None => self
                .conv1
                .backward(&cache.input, &d_a1, &mut d_input, None),
        }

        Ok(d_input)
    }

    /// Splits a flat gradient buffer into per-layer slices, declaration order.
    #[allow(clippy::type_complexity)]
    fn grad_slices<'a>(
        &self,
        grads: &'a mut ParamGrads,
    ) -> (
        &'a mut [f64],
        &'a mut [f64],
        &'a mut [f64],
        &'a mut [f64],
        &'a mut [f64],
        &'a mut [f64],
        &'a mut [f64],
    ) {
        let sizes = [
            self.conv1.w.len(),
            self.conv1.b.len(),
            self.conv2.w.len(),
            self.conv2.b.len(),
            self.linear.w.len(),
            self.linear.b.len(),
            self.classifier.len(),
        ];
        let mut rest = grads.flat.as_mut_slice();
        let mut parts: Vec<&mut [f64]> = Vec::with_capacity(7);
        for s in sizes {
            let (head, tail) = rest.split_at_mut(s);
            parts.push(head);
            rest = tail;
        }
        let mut it = parts.into_iter();
        (
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        )
    }

    /// One SGD-with-momentum step on the flat parameter vector. Errors when
    /// the net is frozen.
    pub fn apply_param_step(
        &mut self,
        grads: &ParamGrads,
        velocity: &mut [f64],
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::NetNotFrozen);
        }
        let mut params = self.flat_params();
        for ((p, v), g) in params
            .iter_mut()
            .zip(velocity.iter_mut())
            .zip(grads.flat.iter())
        {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
        self.set_flat_params(&params);
        Ok(())
    }
}

fn relu(g: &mut Grid2D) {
    for v in g.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Check full-set accuracy every this many steps and stop early once
    /// `target_accuracy` has been reached.
    pub eval_every: usize,
    pub target_accuracy: f64,
    /// Extra steps after the target is reached; grows classifier margins
    /// past the bare-accuracy point.
    pub post_target_steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-2,
            momentum: 0.9,
            seed: 1,
            eval_every: 50,
            target_accuracy: 1.0,
            post_target_steps: 150,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub steps_run: usize,
    pub final_accuracy: f64,
    /// Mean batch loss per step.
    pub loss_curve: Vec<f64>,
}

/// Classification accuracy of `net` on labeled crops.
pub fn accuracy(net: &EmbedNet, crops: &[(Grid2D, usize)]) -> Result<f64> {
    let hits = exec::map_indexed(crops.len(), |i| {
        let (crop, id) = &crops[i];
        let (_, logits, _) = net.forward(crop).expect("forward failed in accuracy");
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        (argmax == *id) as usize
    });
    Ok(hits.iter().sum::<usize>() as f64 / crops.len().max(1) as f64)
}

/// Pretrains the identity classifier with softmax cross-entropy and SGD
/// momentum, then freezes the net. Requires at least 2 identities and
/// 2 crops per identity.
pub fn pretrain(
    mut net: EmbedNet,
    crops: &[(Grid2D, usize)],
    cfg: &PretrainConfig,
) -> Result<(EmbedNet, PretrainReport)> {
    let n_id = net.cfg.n_id;
    let mut counts = vec![0usize; n_id];
    for (_, id) in crops {
        if *id >= n_id {
            return Err(Error::InvalidIdentity { id: *id, n_id });
        }
        counts[*id] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::TooFewIdentities { n_id: present });
    }
    if counts.iter().any(|&c| c > 0 && c < 2) {
        return Err(Error::format(
            "pretrain",
            "every identity needs at least 2 crops",
        ));
    }

    let mut rng = Rng::new(cfg.seed).derive(0x7261);
    let mut order: Vec<usize> = (0..crops.len()).collect();
    let mut pos = crops.len(); // force an initial shuffle
    let mut velocity = vec![0.0; net.param_count()];
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut steps_run = 0;
    let mut stop_after: Option<usize> = None;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if pos >= order.len() {
                rng.shuffle(&mut order);
                pos = 0;
            }
            batch.push(order[pos]);
            pos += 1;
        }

        // Per-sample losses and gradients run in parallel, then accumulate
        // sequentially in batch order.
        let net_ref = &net;
        let results = exec::map_indexed(batch.len(), |bi| {
            let (crop, id) = &crops[batch[bi]];
            let (_, logits, cache) = net_ref.forward(crop).expect("pretrain forward");
            let (loss, dl_dlogits) = classification_loss(&logits, *id).expect("identity range");
            let mut grads = ParamGrads::zeros(net_ref.param_count());
            let zero_de = vec![0.0; net_ref.cfg.embed_dim];
            net_ref
                .backward_with_params(&cache, &zero_de, &dl_dlogits, &mut grads)
                .expect("pretrain backward");
            (loss, grads)
        });

        let mut total = ParamGrads::zeros(net.param_count());
        let mut batch_loss = 0.0;
        for (loss, g) in &results {
            batch_loss += loss;
            total.add(g);
        }
        // Batch-mean objective.
        total.scale(1.0 / batch.len() as f64);
        loss_curve.push(batch_loss / batch.len() as f64);
        net.apply_param_step(&total, &mut velocity, cfg.lr, cfg.momentum)?;
        steps_run = step + 1;

        if let Some(stop) = stop_after {
            if steps_run >= stop {
                break;
            }
        } else if steps_run % cfg.eval_every == 0 && accuracy(&net, crops)? >= cfg.target_accuracy {
            stop_after = Some(steps_run + cfg.post_target_steps);
        }
    }

    let final_accuracy = accuracy(&net, crops)?;
    net.freeze();
    Ok((
        net,
        PretrainReport {
            steps_run,
            final_accuracy,
            loss_curve,
        },
    ))
}

const NET_MAGIC: &[u8; 4] = b"EMB1";

/// Writes the net as: magic "EMB1"; the seven shape fields as little-endian
/// u32; then the flat parameter vector as little-endian f64 in declaration
/// order.
pub fn save_net(net: &EmbedNet, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(NET_MAGIC)?;
    let c = &net.cfg;
    for v in [
        c.crop_h, c.crop_w, c.in_channels, c.conv1_out, c.conv2_out, c.embed_dim, c.n_id,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for p in net.flat_params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

/// Loads a net checkpoint. Loaded nets come back frozen.
pub fn load_net(path: &Path) -> Result<EmbedNet> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NET_MAGIC {
        return Err(Error::format("net checkpoint", "bad magic"));
    }
    let mut buf = [0u8; 4];
    let mut shape = [0usize; 7];
    for s in shape.iter_mut() {
        r.read_exact(&mut buf)?;
        *s = u32::from_le_bytes(buf) as usize;
    }
    let cfg = EmbedConfig {
        crop_h: shape[0],
        crop_w: shape[1],
        in_channels: shape[2],
        conv1_out: shape[3],
        conv2_out: shape[4],
        embed_dim: shape[5],
        n_id: shape[6],
    };
    let mut net = EmbedNet::init(cfg, &mut Rng::new(0));
    let mut flat = vec![0.0f64; net.param_count()];
    let mut f64buf = [0u8; 8];
    for v in flat.iter_mut() {
        r.read_exact(&mut f64buf)?;
        *v = f64::from_le_bytes(f64buf);
    }
    net.set_flat_params(&flat);
    net.freeze();
    Ok(net)
}
