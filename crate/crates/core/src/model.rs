//! Toy stride-32 encoder, sparse decoder with skips and per-level
//! prediction heads, propagation schemes, quadtree-prediction assembly,
//! activation accounting and the QGN1 checkpoint format.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{QgnError, Result};
use crate::mask::{ByteReader, ClassId, Mask, COMPOSITE};
use crate::pyramid::TPyramid;
use crate::sparse::{
    add_fwd, dense_conv_bwd, dense_conv_fwd_counted, dense_relu_bwd, dense_relu_fwd,
    gather_skip_bwd, gather_skip_counted, relu_bwd, relu_fwd, sparse_conv_bwd,
    sparse_conv_fwd_counted, upsample2x_bwd, upsample2x_restricted, ConvParams, DenseTensor,
    Scalar, Site, SparseActivation,
};

const QGN1_MAGIC: &[u8; 4] = b"QGN1";

/// Which decoder sites continue to the next (finer) level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropagationScheme {
    /// Every cell at every level.
    All,
    /// Children of ground-truth composite cells. Needs the gt pyramid.
    Gtc,
    /// Children of predicted-composite cells. Inference only.
    Pc,
}

impl std::str::FromStr for PropagationScheme {
    type Err = QgnError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Self::All),
            "gtc" => Ok(Self::Gtc),
            "pc" => Ok(Self::Pc),
            other => Err(QgnError::Input(format!("unknown scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for PropagationScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::All => "all",
            Self::Gtc => "gtc",
            Self::Pc => "pc",
        })
    }
}

/// Model hyper-parameters. Channel lists are indexed by pyramid level
/// (index 0 = full resolution, index L = bottleneck).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QgnConfig {
    pub levels: u8,
    pub num_classes: u16,
    pub in_channels: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub units_per_block: usize,
    pub seed: u64,
}

impl QgnConfig {
    /// Desk-scale defaults: 5 levels, one-hot input, encoder widths
    /// 8..128 doubling per block, mirrored decoder.
    pub fn toy(num_classes: u16, seed: u64) -> Self {
        Self {
            levels: 5,
            num_classes,
            in_channels: num_classes as usize,
            encoder_channels: vec![8, 16, 32, 64, 128, 128],
            decoder_channels: vec![8, 8, 16, 32, 64, 128],
            units_per_block: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.levels as usize + 1;
        if self.levels < 1 {
            return Err(QgnError::Config("need at least 1 level".into()));
        }
        if self.encoder_channels.len() != n || self.decoder_channels.len() != n {
            return Err(QgnError::Config(format!(
                "channel lists must have {n} entries"
            )));
        }
        if self.num_classes < 2 || self.in_channels == 0 || self.units_per_block == 0 {
            return Err(QgnError::Config("bad class/channel/unit counts".into()));
        }
        Ok(())
    }
}

struct EncLayer<T> {
    conv: ConvParams<T>,
    stride: u32,
}

/// Encoder/decoder/skip/head parameter stack with gradient buffers.
pub struct QgnModel<T> {
    pub cfg: QgnConfig,
    enc: Vec<EncLayer<T>>,
    /// layer index in `enc` whose (post-relu) output is the block-l feature
    enc_block_out: Vec<usize>,
    bottleneck_proj: ConvParams<T>,
    /// block_proj[i] maps level L-i to L-i-1 (3x3 sparse)
    block_proj: Vec<ConvParams<T>>,
    /// units[i][j] = residual unit j of block i (two 3x3 sparse convs)
    units: Vec<Vec<(ConvParams<T>, ConvParams<T>)>>,
    /// skips[l] = 1x1 encoder-to-decoder projection at level l (l < L)
    skips: Vec<ConvParams<T>>,
    /// heads[l] = 1x1 prediction layer at level l (k+1 outputs)
    heads: Vec<ConvParams<T>>,
}

/// Per-level sparse logit maps plus which parents were propagated.
#[derive(Debug, Clone)]
pub struct PredictionQuadtree<T> {
    pub max_level: u8,
    pub width: u32,
    pub height: u32,
    pub num_classes: u16,
    /// logits[l]: SparseActivation with k+1 channels at level l
    pub logits: Vec<SparseActivation<T>>,
    /// propagated[l]: active cells at level l whose children were activated
    pub propagated: Vec<BTreeSet<Site>>,
}

/// Stored-activation and multiply-add counts for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub scalars: u64,
    pub madds: u64,
}

/// Per-layer activation accounting for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActivationReport {
    pub layers: Vec<LayerCount>,
}

impl ActivationReport {
    fn push(&mut self, name: impl Into<String>, scalars: u64, madds: u64) {
        self.layers.push(LayerCount { name: name.into(), scalars, madds });
    }

    pub fn encoder_scalars(&self) -> u64 {
        self.layers.iter().filter(|l| l.name.starts_with("enc.")).map(|l| l.scalars).sum()
    }

    pub fn decoder_scalars(&self) -> u64 {
        self.layers.iter().filter(|l| !l.name.starts_with("enc.")).map(|l| l.scalars).sum()
    }

    pub fn total_scalars(&self) -> u64 {
        self.layers.iter().map(|l| l.scalars).sum()
    }

    pub fn total_madds(&self) -> u64 {
        self.layers.iter().map(|l| l.madds).sum()
    }
}

/// Caches required by the backward pass.
pub struct ForwardTrace<T> {
    enc_inputs: Vec<DenseTensor<T>>,
    enc_pre: Vec<DenseTensor<T>>,
    /// encoder block features F_l, index by level
    pub(crate) feats: Vec<DenseTensor<T>>,
    bneck_input: SparseActivation<T>,
    bneck_pre: SparseActivation<T>,
    /// decoder state A_l per level (head input), index by level
    pub(crate) states: Vec<SparseActivation<T>>,
    blocks: Vec<DecBlockTrace<T>>,
}

struct DecBlockTrace<T> {
    child_level: u8,
    parents: BTreeSet<Site>,
    up_out: SparseActivation<T>,
    proj_pre: SparseActivation<T>,
    unit_traces: Vec<UnitTrace<T>>,
}

struct UnitTrace<T> {
    input: SparseActivation<T>,
    c1_pre: SparseActivation<T>,
    c1_out: SparseActivation<T>,
    sum: SparseActivation<T>,
}

/// Everything produced by one forward pass.
pub struct ForwardPass<T> {
    pub prediction: PredictionQuadtree<T>,
    pub report: ActivationReport,
    pub trace: ForwardTrace<T>,
}

/// One-hot image for a label mask: channel c-1 is 1 where the mask is c.
pub fn mask_to_image<T: Scalar>(mask: &Mask) -> DenseTensor<T> {
    let k = mask.num_classes() as usize;
    let mut img = DenseTensor::zeros(mask.height(), mask.width(), k);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            img.at_mut(y, x)[(mask.get(x, y) - 1) as usize] = T::one();
        }
    }
    img
}

fn uniform_init<T: Scalar>(p: &mut ConvParams<T>, rng: &mut ChaCha8Rng) {
    let fan_in = (p.c_in * p.kh * p.kw) as f64;
    let bound = (6.0 / fan_in).sqrt();
    for w in p.w.iter_mut() {
        *w = T::from_f64(rng.gen_range(-bound..bound)).unwrap();
    }
    // biases start at zero
}

impl<T: Scalar> QgnModel<T> {
    /// Deterministic seeded initialization; same config gives identical
    /// parameters.
    pub fn init(cfg: QgnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed);
        for p in model.param_layers_mut() {
            uniform_init(p, &mut rng);
        }
        Ok(model)
    }

    fn zeros(cfg: QgnConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.levels as usize;
        let ec = &cfg.encoder_channels;
        let dc = &cfg.decoder_channels;
        let k1 = cfg.num_classes as usize + 1;
        let mut enc = Vec::new();
        let mut enc_block_out = Vec::new();
        for b in 0..=levels {
            if b > 0 {
                enc.push(EncLayer { conv: ConvParams::zeros(ec[b], ec[b - 1], 3, 3), stride: 2 });
            }
            let cin = if b == 0 { cfg.in_channels } else { ec[b] };
            enc.push(EncLayer { conv: ConvParams::zeros(ec[b], cin, 3, 3), stride: 1 });
            enc.push(EncLayer { conv: ConvParams::zeros(ec[b], ec[b], 3, 3), stride: 1 });
            enc_block_out.push(enc.len() - 1);
        }
        let bottleneck_proj = ConvParams::zeros(dc[levels], ec[levels], 3, 3);
        let mut block_proj = Vec::new();
        let mut units = Vec::new();
        for i in 0..levels {
            let (parent, child) = (levels - i, levels - i - 1);
            block_proj.push(ConvParams::zeros(dc[child], dc[parent], 3, 3));
            units.push(
                (0..cfg.units_per_block)
                    .map(|_| {
                        (
                            ConvParams::zeros(dc[child], dc[child], 3, 3),
                            ConvParams::zeros(dc[child], dc[child], 3, 3),
                        )
                    })
                    .collect(),
            );
        }
        let skips = (0..levels).map(|l| ConvParams::zeros(dc[l], ec[l], 1, 1)).collect();
        let heads = (0..=levels).map(|l| ConvParams::zeros(k1, dc[l], 1, 1)).collect();
        Ok(Self { cfg, enc, enc_block_out, bottleneck_proj, block_proj, units, skips, heads })
    }

    /// All parameter layers in the canonical order used for init and the
    /// QGN1 checkpoint: encoder convs (forward order), bottleneck
    /// projection, block projections with their residual units
    /// (coarse to fine), skips (level 0..L-1), heads (level 0..L).
    pub fn param_layers(&self) -> Vec<&ConvParams<T>> {
        let mut out: Vec<&ConvParams<T>> = self.enc.iter().map(|l| &l.conv).collect();
        out.push(&self.bottleneck_proj);
        for (proj, units) in self.block_proj.iter().zip(&self.units) {
            out.push(proj);
            for (c1, c2) in units {
                out.push(c1);
                out.push(c2);
            }
        }
        out.extend(self.skips.iter());
        out.extend(self.heads.iter());
        out
    }

    pub fn param_layers_mut(&mut self) -> Vec<&mut ConvParams<T>> {
        let mut out: Vec<&mut ConvParams<T>> = self.enc.iter_mut().map(|l| &mut l.conv).collect();
        out.push(&mut self.bottleneck_proj);
        for (proj, units) in self.block_proj.iter_mut().zip(self.units.iter_mut()) {
            out.push(proj);
            for (c1, c2) in units.iter_mut() {
                out.push(c1);
                out.push(c2);
            }
        }
        out.extend(self.skips.iter_mut());
        out.extend(self.heads.iter_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_layers().iter().map(|p| p.param_count()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.param_layers_mut() {
            p.zero_grads();
        }
    }

    /// Run the network. Under GTC the ground-truth pyramid selects the
    /// active sites; under PC the network's own composite predictions do.
    pub fn forward(
        &self,
        image: &DenseTensor<T>,
        scheme: PropagationScheme,
        gt: Option<&TPyramid>,
    ) -> Result<ForwardPass<T>> {
        let levels = self.cfg.levels;
        let div = 1u32 << levels;
        if image.height % div != 0 || image.width % div != 0 {
            return Err(QgnError::Shape(format!(
                "image dims {}x{} not divisible by 2^{levels}",
                image.width, image.height
            )));
        }
        if image.channels != self.cfg.in_channels {
            return Err(QgnError::Shape(format!(
                "expected {} input channels, got {}",
                self.cfg.in_channels, image.channels
            )));
        }
        let gt = match (scheme, gt) {
            (PropagationScheme::Gtc, None) => {
                return Err(QgnError::Config("GTC propagation requires a ground-truth pyramid".into()))
            }
            (PropagationScheme::Gtc, Some(g)) => {
                if g.width() != image.width || g.height() != image.height {
                    return Err(QgnError::Shape("gt pyramid dims do not match image".into()));
                }
                if g.max_level() < levels {
                    return Err(QgnError::Shape("gt pyramid has too few levels".into()));
                }
                Some(g)
            }
            (_, g) => g,
        };
        let k1 = self.cfg.num_classes as usize + 1;
        let mut report = ActivationReport::default();

        // Encoder.
        let mut enc_inputs = Vec::new();
        let mut enc_pre = Vec::new();
        let mut feats = Vec::new();
        let mut x = image.clone();
        let mut layer_idx = 0usize;
        for b in 0..=levels as usize {
            let n_layers = if b == 0 { 2 } else { 3 };
            for j in 0..n_layers {
                let layer = &self.enc[layer_idx];
                let mut madds = 0u64;
                let pre = dense_conv_fwd_counted(&x, &layer.conv, layer.stride, &mut madds)?;
                let name = if layer.stride == 2 {
                    format!("enc.down{b}")
                } else {
                    format!("enc.b{b}.c{}", if b == 0 { j + 1 } else { j })
                };
                report.push(name, pre.data.len() as u64, madds);
                let out = dense_relu_fwd(&pre);
                enc_inputs.push(x);
                enc_pre.push(pre);
                x = out;
                layer_idx += 1;
            }
            feats.push(x.clone());
        }

        // Bottleneck: dense feature becomes a fully active sparse map.
        let coarse = &feats[levels as usize];
        let full = SparseActivation::<T>::full_sites(coarse.width, coarse.height);
        let bneck_input = SparseActivation::from_dense(coarse, levels, &full);
        let mut madds = 0u64;
        let bneck_pre = sparse_conv_fwd_counted(&bneck_input, &self.bottleneck_proj, &mut madds)?;
        report.push(
            format!("dec.proj.l{levels}"),
            (bneck_pre.len() * bneck_pre.channels) as u64,
            madds,
        );
        let mut state = relu_fwd(&bneck_pre);

        let mut states: Vec<Option<SparseActivation<T>>> = vec![None; levels as usize + 1];
        let mut logits: Vec<Option<SparseActivation<T>>> = vec![None; levels as usize + 1];
        let mut propagated: Vec<BTreeSet<Site>> = vec![BTreeSet::new(); levels as usize + 1];
        let mut blocks = Vec::new();

        let mut head_madds = 0u64;
        let q_top = gather_head(&state, &self.heads[levels as usize], &mut head_madds)?;
        report.push(format!("head.l{levels}"), (q_top.len() * k1) as u64, head_madds);
        logits[levels as usize] = Some(q_top);
        states[levels as usize] = Some(state.clone());

        for child in (0..levels).rev() {
            let parent = child + 1;
            let q_parent = logits[parent as usize].as_ref().unwrap();
            let parents: BTreeSet<Site> = match scheme {
                PropagationScheme::All => state.site_set(),
                PropagationScheme::Gtc => {
                    let g = gt.unwrap();
                    state
                        .site_set()
                        .into_iter()
                        .filter(|&(y, x)| g.query(parent, x, y).unwrap() == COMPOSITE)
                        .collect()
                }
                PropagationScheme::Pc => q_parent
                    .sites
                    .iter()
                    .filter(|(_, v)| argmax_lowest(v) == 0)
                    .map(|(&s, _)| s)
                    .collect(),
            };
            propagated[parent as usize] = parents.clone();
            let up_out = upsample2x_restricted(&state, &parents);
            report.push(
                format!("dec.up.l{child}"),
                (up_out.len() * up_out.channels) as u64,
                0,
            );
            let block_index = (levels - 1 - child) as usize;
            let mut madds = 0u64;
            let proj_pre =
                sparse_conv_fwd_counted(&up_out, &self.block_proj[block_index], &mut madds)?;
            report.push(
                format!("dec.proj.l{child}"),
                (proj_pre.len() * proj_pre.channels) as u64,
                madds,
            );
            let mut h = relu_fwd(&proj_pre);
            let mut unit_traces = Vec::new();
            for (j, (c1, c2)) in self.units[block_index].iter().enumerate() {
                let input = h;
                let mut m1 = 0u64;
                let c1_pre = sparse_conv_fwd_counted(&input, c1, &mut m1)?;
                report.push(
                    format!("dec.l{child}.u{j}.c1"),
                    (c1_pre.len() * c1_pre.channels) as u64,
                    m1,
                );
                let c1_out = relu_fwd(&c1_pre);
                let mut m2 = 0u64;
                let c2_out = sparse_conv_fwd_counted(&c1_out, c2, &mut m2)?;
                report.push(
                    format!("dec.l{child}.u{j}.c2"),
                    (c2_out.len() * c2_out.channels) as u64,
                    m2,
                );
                let sum = add_fwd(&c2_out, &input)?;
                h = relu_fwd(&sum);
                unit_traces.push(UnitTrace { input, c1_pre, c1_out, sum });
            }
            let mut skip_madds = 0u64;
            let skip_out = gather_skip_counted(
                &feats[child as usize],
                &h.site_set(),
                &self.skips[child as usize],
                &mut skip_madds,
            )?;
            report.push(
                format!("skip.l{child}"),
                (skip_out.len() * skip_out.channels) as u64,
                skip_madds,
            );
            let mut a = add_fwd(&h, &skip_out)?;
            a.level = child;
            let mut hm = 0u64;
            let q = gather_head(&a, &self.heads[child as usize], &mut hm)?;
            report.push(format!("head.l{child}"), (q.len() * k1) as u64, hm);
            logits[child as usize] = Some(q);
            states[child as usize] = Some(a.clone());
            blocks.push(DecBlockTrace {
                child_level: child,
                parents,
                up_out,
                proj_pre,
                unit_traces,
            });
            state = a;
        }

        let mut out_logits = Vec::new();
        let mut out_states = Vec::new();
        for l in 0..=levels as usize {
            let (w, h) = (image.width >> l, image.height >> l);
            let mut q = logits[l]
                .take()
                .unwrap_or_else(|| SparseActivation::empty(l as u8, w, h, k1));
            q.level = l as u8;
            out_logits.push(q);
            out_states.push(
                states[l]
                    .take()
                    .unwrap_or_else(|| SparseActivation::empty(l as u8, w, h, 0)),
            );
        }

        Ok(ForwardPass {
            prediction: PredictionQuadtree {
                max_level: levels,
                width: image.width,
                height: image.height,
                num_classes: self.cfg.num_classes,
                logits: out_logits,
                propagated,
            },
            report,
            trace: ForwardTrace {
                enc_inputs,
                enc_pre,
                feats,
                bneck_input,
                bneck_pre,
                states: out_states,
                blocks,
            },
        })
    }

    /// Reverse-mode through heads, skips, decoder and encoder.
    /// `logit_grads[l]` is dLoss/dlogits at level l (sites must equal the
    /// forward logits' sites); `None` skips the level.
    pub fn backward(
        &mut self,
        pass: &ForwardPass<T>,
        logit_grads: Vec<Option<SparseActivation<T>>>,
    ) -> Result<()> {
        let levels = self.cfg.levels as usize;
        if logit_grads.len() != levels + 1 {
            return Err(QgnError::Shape("need one logit grad slot per level".into()));
        }
        let trace = &pass.trace;
        // Head contributions to each decoder state gradient.
        let mut d_state: Vec<SparseActivation<T>> = Vec::with_capacity(levels + 1);
        for l in 0..=levels {
            let a = &trace.states[l];
            let mut zero = SparseActivation::empty(a.level, a.width, a.height, a.channels);
            for key in a.sites.keys() {
                zero.sites.insert(*key, vec![T::zero(); a.channels]);
            }
            d_state.push(zero);
        }
        for (l, g) in logit_grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if g.site_set() != pass.prediction.logits[l].site_set() {
                return Err(QgnError::Shape(format!("logit grad sites mismatch at level {l}")));
            }
            if g.is_empty() {
                continue;
            }
            let input_grad = sparse_conv_bwd(&trace.states[l], &mut self.heads[l], &g)?;
            add_into(&mut d_state[l], &input_grad);
        }

        // Encoder feature gradients, filled by skips and the bottleneck.
        let mut d_feats: Vec<DenseTensor<T>> = trace
            .feats
            .iter()
            .map(|f| DenseTensor::zeros(f.height, f.width, f.channels))
            .collect();

        // Decoder blocks, fine to coarse.
        for block in trace.blocks.iter().rev() {
            let child = block.child_level as usize;
            let parent = child + 1;
            let block_index = levels - 1 - child;
            let g_a = d_state[child].clone();
            // A = units_out + skip_out: the gradient flows to both.
            gather_skip_bwd(
                &trace.feats[child],
                &mut self.skips[child],
                &g_a,
                &mut d_feats[child],
            )?;
            let mut g = g_a;
            for (j, ut) in block.unit_traces.iter().enumerate().rev() {
                let (c1, c2) = &mut self.units[block_index][j];
                let g_sum = relu_bwd(&ut.sum, &g)?;
                let g_c1out = sparse_conv_bwd(&ut.c1_out, c2, &g_sum)?;
                let g_c1pre = relu_bwd(&ut.c1_pre, &g_c1out)?;
                let g_in = sparse_conv_bwd(&ut.input, c1, &g_c1pre)?;
                g = add_fwd(&g_in, &g_sum)?; // shortcut path
            }
            let g_proj = relu_bwd(&block.proj_pre, &g)?;
            let g_up = sparse_conv_bwd(&block.up_out, &mut self.block_proj[block_index], &g_proj)?;
            let parent_state = &trace.states[parent];
            let g_parent = upsample2x_bwd(
                &g_up,
                &block.parents,
                (parent_state.height, parent_state.width),
                parent_state.level,
            );
            add_into(&mut d_state[parent], &g_parent);
        }

        // Bottleneck projection back into the dense encoder feature.
        let g_bneck = relu_bwd(&trace.bneck_pre, &d_state[levels])?;
        let g_sparse_feat = sparse_conv_bwd(&trace.bneck_input, &mut self.bottleneck_proj, &g_bneck)?;
        for (&(y, x), v) in &g_sparse_feat.sites {
            let dst = d_feats[levels].at_mut(y, x);
            for (d, &c) in dst.iter_mut().zip(v) {
                *d = *d + c;
            }
        }

        // Encoder, reverse layer order. Block outputs pick up the skip /
        // bottleneck gradients when reached.
        let mut g: Option<DenseTensor<T>> = None;
        for i in (0..self.enc.len()).rev() {
            if let Some(b) = self.enc_block_out.iter().position(|&idx| idx == i) {
                let df = &d_feats[b];
                g = Some(match g {
                    None => df.clone(),
                    Some(mut acc) => {
                        for (a, &d) in acc.data.iter_mut().zip(&df.data) {
                            *a = *a + d;
                        }
                        acc
                    }
                });
            }
            let g_out = g.take().unwrap();
            let g_pre = dense_relu_bwd(&trace.enc_pre[i], &g_out);
            let stride = self.enc[i].stride;
            g = Some(dense_conv_bwd(
                &trace.enc_inputs[i],
                &mut self.enc[i].conv,
                &g_pre,
                stride,
            )?);
        }
        Ok(())
    }
}

fn gather_head<T: Scalar>(
    state: &SparseActivation<T>,
    head: &ConvParams<T>,
    madds: &mut u64,
) -> Result<SparseActivation<T>> {
    let mut out = sparse_conv_fwd_counted(state, head, madds)?;
    out.level = state.level;
    Ok(out)
}

/// Add `src` into `dst` on src's sites (which must be a subset).
fn add_into<T: Scalar>(dst: &mut SparseActivation<T>, src: &SparseActivation<T>) {
    for (key, v) in &src.sites {
        let d = dst.sites.get_mut(key).expect("add_into: site not present in target");
        for (dc, &sc) in d.iter_mut().zip(v) {
            *dc = *dc + sc;
        }
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Leaf label for one cell: argmax over k+1 channels; a composite argmax
/// falls back to the best non-composite channel.
pub fn leaf_label<T: Scalar>(logits: &[T]) -> ClassId {
    let top = argmax_lowest(logits);
    if top != 0 {
        return top as ClassId;
    }
    (argmax_lowest(&logits[1..]) + 1) as ClassId
}

/// Accumulate leaf predictions into a dense mask. A cell is a leaf iff it
/// was not propagated further.
pub fn assemble<T: Scalar>(
    pred: &PredictionQuadtree<T>,
    width: u32,
    height: u32,
) -> Result<Mask> {
    if width != pred.width || height != pred.height {
        return Err(QgnError::Shape("assemble dims do not match prediction".into()));
    }
    let n = (width as usize) * (height as usize);
    let mut data = vec![COMPOSITE; n];
    let mut covered = 0usize;
    for l in 0..=pred.max_level {
        let q = &pred.logits[l as usize];
        let propagated = &pred.propagated[l as usize];
        for (&(y, x), logits) in &q.sites {
            if l > 0 && propagated.contains(&(y, x)) {
                continue;
            }
            let label = leaf_label(logits);
            let size = 1u32 << l;
            for yy in y * size..(y + 1) * size {
                for xx in x * size..(x + 1) * size {
                    let i = (yy as usize) * (width as usize) + xx as usize;
                    if data[i] != COMPOSITE {
                        return Err(QgnError::Structure(format!(
                            "leaf regions overlap at ({xx},{yy})"
                        )));
                    }
                    data[i] = label;
                }
            }
            covered += (size as usize) * (size as usize);
        }
    }
    if covered != n {
        return Err(QgnError::Structure(format!(
            "leaf regions cover {covered} of {n} pixels"
        )));
    }
    Mask::new(width, height, pred.num_classes, data)
}

/// Active sites and propagated parents per level, used by the analytic
/// activation predictor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SitePlan {
    /// active[l]: decoder active sites at level l
    pub active: Vec<BTreeSet<Site>>,
    /// parents[l]: cells at level l whose children are activated
    pub parents: Vec<BTreeSet<Site>>,
}

fn children_of(parents: &BTreeSet<Site>) -> BTreeSet<Site> {
    let mut out = BTreeSet::new();
    for &(y, x) in parents {
        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            out.insert((2 * y + dy, 2 * x + dx));
        }
    }
    out
}

impl SitePlan {
    /// Everything active at every level.
    pub fn all(levels: u8, width: u32, height: u32) -> Self {
        let mut active = Vec::new();
        let mut parents = vec![BTreeSet::new()];
        for l in 0..=levels {
            let s = SparseActivation::<f32>::full_sites(width >> l, height >> l);
            active.push(s);
        }
        for l in 1..=levels {
            parents.push(active[l as usize].clone());
        }
        Self { active, parents }
    }

    /// Children of ground-truth composite cells.
    pub fn from_gt(levels: u8, gt: &TPyramid) -> Result<Self> {
        if gt.max_level() < levels {
            return Err(QgnError::Shape("gt pyramid has too few levels".into()));
        }
        let (cw, ch) = gt.level_dims(levels);
        let mut active = vec![BTreeSet::new(); levels as usize + 1];
        let mut parents = vec![BTreeSet::new(); levels as usize + 1];
        active[levels as usize] = SparseActivation::<f32>::full_sites(cw, ch);
        for l in (1..=levels).rev() {
            parents[l as usize] = active[l as usize]
                .iter()
                .filter(|&&(y, x)| gt.query(l, x, y).unwrap() == COMPOSITE)
                .copied()
                .collect();
            active[l as usize - 1] = children_of(&parents[l as usize]);
        }
        Ok(Self { active, parents })
    }

    /// Site structure realized by an earlier forward pass.
    pub fn from_prediction<T: Scalar>(pred: &PredictionQuadtree<T>) -> Self {
        Self {
            active: pred.logits.iter().map(|q| q.site_set()).collect(),
            parents: pred.propagated.clone(),
        }
    }
}

fn dense_conv_madds(h: u32, w: u32, kh: usize, kw: usize, stride: u32, cin: usize, cout: usize) -> u64 {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let (oy, ox) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut taps = 0u64;
    for y in 0..oh {
        for x in 0..ow {
            for ky in 0..kh {
                for kx in 0..kw {
                    let sy = (y * stride) as i64 + ky as i64 - oy;
                    let sx = (x * stride) as i64 + kx as i64 - ox;
                    if sy >= 0 && sx >= 0 && sy < h as i64 && sx < w as i64 {
                        taps += 1;
                    }
                }
            }
        }
    }
    taps * (cin as u64) * (cout as u64)
}

fn sparse_conv_madds(sites: &BTreeSet<Site>, h: u32, w: u32, cin: usize, cout: usize) -> u64 {
    let mut taps = 0u64;
    for &(y, x) in sites {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let sy = y as i64 + dy;
                let sx = x as i64 + dx;
                if sy >= 0
                    && sx >= 0
                    && sy < h as i64
                    && sx < w as i64
                    && sites.contains(&(sy as u32, sx as u32))
                {
                    taps += 1;
                }
            }
        }
    }
    taps * (cin as u64) * (cout as u64)
}

/// Predict the per-layer stored-activation scalars and multiply-add
/// counts of a forward pass, from dimensions and the site plan alone.
/// Matches the instrumented [`ActivationReport`] exactly.
pub fn count_activations(
    cfg: &QgnConfig,
    width: u32,
    height: u32,
    plan: &SitePlan,
) -> Result<ActivationReport> {
    cfg.validate()?;
    let levels = cfg.levels as usize;
    let ec = &cfg.encoder_channels;
    let dc = &cfg.decoder_channels;
    let k1 = cfg.num_classes as usize + 1;
    let mut report = ActivationReport::default();
    // Encoder.
    let (mut h, mut w) = (height, width);
    for b in 0..=levels {
        if b > 0 {
            report.push(
                format!("enc.down{b}"),
                ((h.div_ceil(2) * w.div_ceil(2)) as u64) * ec[b] as u64,
                dense_conv_madds(h, w, 3, 3, 2, ec[b - 1], ec[b]),
            );
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        let cin = if b == 0 { cfg.in_channels } else { ec[b] };
        report.push(
            format!("enc.b{b}.c1"),
            ((h * w) as u64) * ec[b] as u64,
            dense_conv_madds(h, w, 3, 3, 1, cin, ec[b]),
        );
        report.push(
            format!("enc.b{b}.c2"),
            ((h * w) as u64) * ec[b] as u64,
            dense_conv_madds(h, w, 3, 3, 1, ec[b], ec[b]),
        );
    }
    // Decoder.
    let level_dims = |l: usize| (height >> l, width >> l);
    let (ch, cw) = level_dims(levels);
    let top = &plan.active[levels];
    report.push(
        format!("dec.proj.l{levels}"),
        (top.len() * dc[levels]) as u64,
        sparse_conv_madds(top, ch, cw, ec[levels], dc[levels]),
    );
    report.push(
        format!("head.l{levels}"),
        (top.len() * k1) as u64,
        (top.len() * dc[levels] * k1) as u64,
    );
    for child in (0..levels).rev() {
        let parent = child + 1;
        let (h, w) = level_dims(child);
        let sites = &plan.active[child];
        let n_parents = plan.parents[parent].len() as u64;
        report.push(format!("dec.up.l{child}"), 4 * n_parents * dc[parent] as u64, 0);
        report.push(
            format!("dec.proj.l{child}"),
            (sites.len() * dc[child]) as u64,
            sparse_conv_madds(sites, h, w, dc[parent], dc[child]),
        );
        for j in 0..cfg.units_per_block {
            let m = sparse_conv_madds(sites, h, w, dc[child], dc[child]);
            report.push(format!("dec.l{child}.u{j}.c1"), (sites.len() * dc[child]) as u64, m);
            report.push(format!("dec.l{child}.u{j}.c2"), (sites.len() * dc[child]) as u64, m);
        }
        report.push(
            format!("skip.l{child}"),
            (sites.len() * dc[child]) as u64,
            (sites.len() * ec[child] * dc[child]) as u64,
        );
        report.push(
            format!("head.l{child}"),
            (sites.len() * k1) as u64,
            (sites.len() * dc[child] * k1) as u64,
        );
    }
    Ok(report)
}

/// Write the QGN1 checkpoint: magic, config header, then every parameter
/// layer in canonical order as little-endian f32 (weights then bias).
pub fn write_checkpoint(model: &QgnModel<f32>, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn encode_checkpoint(model: &QgnModel<f32>) -> Vec<u8> {
    let cfg = &model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(QGN1_MAGIC);
    out.push(cfg.levels);
    out.extend_from_slice(&cfg.num_classes.to_le_bytes());
    out.extend_from_slice(&(cfg.in_channels as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.units_per_block as u32).to_le_bytes());
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    for &c in &cfg.encoder_channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for &c in &cfg.decoder_channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    for p in model.param_layers() {
        for &v in &p.w {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &p.b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(path: &Path) -> Result<QgnModel<f32>> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<QgnModel<f32>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != QGN1_MAGIC {
        return Err(QgnError::Format("bad QGN1 magic".into()));
    }
    let levels = r.u8()?;
    let num_classes = r.u16()?;
    let in_channels = r.u32()? as usize;
    let units_per_block = r.u32()? as usize;
    let seed = r.u64()?;
    let n = levels as usize + 1;
    let mut encoder_channels = Vec::with_capacity(n);
    for _ in 0..n {
        encoder_channels.push(r.u32()? as usize);
    }
    let mut decoder_channels = Vec::with_capacity(n);
    for _ in 0..n {
        decoder_channels.push(r.u32()? as usize);
    }
    let cfg = QgnConfig {
        levels,
        num_classes,
        in_channels,
        encoder_channels,
        decoder_channels,
        units_per_block,
        seed,
    };
    let mut model = QgnModel::<f32>::zeros(cfg).map_err(|e| match e {
        QgnError::Config(m) => QgnError::Format(m),
        e => e,
    })?;
    for p in model.param_layers_mut() {
        for v in p.w.iter_mut() {
            *v = r.f32()?;
        }
        for v in p.b.iter_mut() {
            *v = r.f32()?;
        }
    }
    if !r.is_empty() {
        return Err(QgnError::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(model)
}
