use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{HeadKind, ModelConfig};
use crate::blocks::{
    eoc_block, patch_embed, prediction_head, sa_block, BlockWeights, FeatureMap, HeadWeights, Init,
    LayerNormWeights, LinearWeights, Mode, PatchEmbedWeights, Tokens,
};
use crate::error::{contract_err, dim_err, Result};
use crate::tensor::{Float, Graph, PadKind, PadMode, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageWeights {
    pub embed: PatchEmbedWeights,
    pub blocks: Vec<BlockWeights>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Heads {
    Tracking {
        cls: HeadWeights,
        reg: HeadWeights,
        /// Normalization of the correlation map, for [`HeadKind::DwCorr`].
        corr_norm: Option<LayerNormWeights>,
    },
    Classifier {
        norm: LayerNormWeights,
        fc: LinearWeights,
    },
}

/// One unit of the serial backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Embed { stage: usize },
    Block { stage: usize, block: usize, mode: Mode },
}

/// `cls:[1,h,w]` foreground probabilities and `reg:[4,h,w]` normalized
/// left/top/right/bottom distances.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<F> {
    pub cls: Tensor<F>,
    pub reg: Tensor<F>,
}

/// Both branches' features after every backbone step.
#[derive(Clone, Debug)]
pub struct Trace<F> {
    pub steps: Vec<Step>,
    pub z: Vec<FeatureMap<F>>,
    pub x: Vec<FeatureMap<F>>,
    pub prediction: Prediction<F>,
}

/// Template features computed once per sequence: the template branch is
/// advanced up to (not including) `next_step`, the first step that reads
/// the search branch.
#[derive(Clone, Debug)]
pub struct TemplateCache<F> {
    pub next_step: usize,
    pub features: FeatureMap<F>,
}

#[derive(Clone, Debug)]
pub struct Model<F: Float = f32> {
    config: ModelConfig,
    store: ParamStore<F>,
    stages: Vec<StageWeights>,
    heads: Heads,
}

/// Builds a model with freshly initialized weights; deterministic in `seed`.
pub fn build_model<F: Float>(config: &ModelConfig, seed: u64) -> Result<Model<F>> {
    Model::new(config, seed)
}

impl<F: Float> Model<F> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            let pe = &s.patch_embed;
            let prefix = format!("stage{}", i + 1);
            let embed = PatchEmbedWeights::init(
                &mut init,
                &format!("{prefix}.embed"),
                c_in,
                pe.channels,
                pe.kernel,
                pe.stride,
            );
            let blocks = (0..s.depth)
                .map(|b| BlockWeights::init(&mut init, &format!("{prefix}.block{}", b + 1), &s.attn()))
                .collect();
            stages.push(StageWeights { embed, blocks });
            c_in = pe.channels;
        }
        let heads = match config.classes {
            Some(classes) => Heads::Classifier {
                norm: init.layer_norm("classifier.norm", c_in),
                fc: init.linear("classifier.fc", c_in, classes),
            },
            None => {
                let n = config.score_size();
                let grid = (n, n);
                let corr_norm = (config.head == HeadKind::DwCorr).then(|| init.layer_norm("head.corr.norm", c_in));
                Heads::Tracking {
                    cls: HeadWeights::init(&mut init, "head.cls", c_in, grid, config.head_depth, 1, config.head_spatial),
                    reg: HeadWeights::init(&mut init, "head.reg", c_in, grid, config.head_depth, 4, config.head_spatial),
                    corr_norm,
                }
            }
        };
        Ok(Self { config: config.clone(), store, stages, heads })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn stages(&self) -> &[StageWeights] {
        &self.stages
    }

    /// Switches the padding of every convolution; weights are unaffected.
    pub fn set_padding(&mut self, padding: PadKind) {
        self.config.padding = padding;
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    /// Parameters of the stages (patch embeddings and blocks), excluding heads.
    pub fn backbone_param_count(&self) -> usize {
        self.store.iter().filter(|(_, name, _)| name.starts_with("stage")).map(|(_, _, t)| t.numel()).sum()
    }

    /// Same architecture and weights in another float type.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model { config: self.config.clone(), store: self.store.cast(), stages: self.stages.clone(), heads: self.heads.clone() }
    }

    pub fn steps(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        for (stage, s) in self.config.stages.iter().enumerate() {
            steps.push(Step::Embed { stage });
            for block in 0..s.depth {
                let mode = if s.is_cross(block) { Mode::CrossAttn } else { Mode::SelfAttn };
                steps.push(Step::Block { stage, block, mode });
            }
        }
        steps
    }

    /// Index of the first cross-attention step, or the step count.
    pub fn first_cross_step(&self) -> usize {
        let steps = self.steps();
        steps
            .iter()
            .position(|s| matches!(s, Step::Block { mode: Mode::CrossAttn, .. }))
            .unwrap_or(steps.len())
    }

    fn check_image(&self, img: &Tensor<F>, size: usize, what: &str) -> Result<()> {
        if img.shape() != [3, size, size] {
            return Err(dim_err!("{what} must be [3,{size},{size}], got {:?}", img.shape()));
        }
        Ok(())
    }

    fn step_one(&self, g: &mut Graph<F>, step: Step, f: Tokens) -> Result<Tokens> {
        let pad = self.config.padding;
        match step {
            Step::Embed { stage } => {
                let chw = f.to_chw(g)?;
                patch_embed(g, &self.store, &self.stages[stage].embed, chw, pad)
            }
            Step::Block { stage, block, mode: Mode::SelfAttn } => {
                let cfg = self.config.stages[stage].attn();
                sa_block(g, &self.store, &self.stages[stage].blocks[block], &cfg, pad, f)
            }
            Step::Block { mode: Mode::CrossAttn, .. } => Err(contract_err!("cross-attention step needs both branches")),
        }
    }

    /// Advances the present branches through `steps[from..to]`, calling
    /// `tap` with the step index after each step.
    #[allow(clippy::type_complexity)]
    pub fn run_steps(
        &self,
        g: &mut Graph<F>,
        from: usize,
        to: usize,
        mut z: Option<Tokens>,
        mut x: Option<Tokens>,
        mut tap: impl FnMut(&mut Graph<F>, usize, Option<Tokens>, Option<Tokens>) -> Result<()>,
    ) -> Result<(Option<Tokens>, Option<Tokens>)> {
        let steps = self.steps();
        if from > to || to > steps.len() {
            return Err(contract_err!("step range {from}..{to} outside 0..{}", steps.len()));
        }
        for (i, &step) in steps.iter().enumerate().take(to).skip(from) {
            match step {
                Step::Block { stage, block, mode: Mode::CrossAttn } => {
                    let (Some(fz), Some(fx)) = (z, x) else {
                        return Err(contract_err!("cross-attention step {i} needs both branches"));
                    };
                    let cfg = self.config.stages[stage].attn();
                    let w = &self.stages[stage].blocks[block];
                    let (nz, nx) = eoc_block(g, &self.store, w, &cfg, Mode::CrossAttn, self.config.padding, fz, fx)?;
                    z = Some(nz);
                    x = Some(nx);
                }
                _ => {
                    z = z.map(|f| self.step_one(g, step, f)).transpose()?;
                    x = x.map(|f| self.step_one(g, step, f)).transpose()?;
                }
            }
            tap(g, i, z, x)?;
        }
        Ok((z, x))
    }

    /// Final template and search tokens of the backbone.
    pub fn backbone(&self, g: &mut Graph<F>, z: Var, x: Var) -> Result<(Tokens, Tokens)> {
        let z = Tokens::from_chw(g, z)?;
        let x = Tokens::from_chw(g, x)?;
        let n = self.steps().len();
        let (z, x) = self.run_steps(g, 0, n, Some(z), Some(x), |_, _, _, _| Ok(()))?;
        Ok((z.expect("template branch present"), x.expect("search branch present")))
    }

    /// Prediction heads on the backbone output; returns `(cls, reg)` maps.
    pub fn head_graph(&self, g: &mut Graph<F>, z: Tokens, x: Tokens) -> Result<(Var, Var)> {
        let Heads::Tracking { cls, reg, corr_norm } = &self.heads else {
            return Err(contract_err!("classifier model has no tracking heads"));
        };
        let feat = match corr_norm {
            None => x,
            Some(norm) => {
                let corr = depthwise_xcorr(g, z, x)?;
                corr.with_var(norm.apply(g, &self.store, corr.var)?)
            }
        };
        let c = prediction_head(g, &self.store, cls, feat)?;
        let r = prediction_head(g, &self.store, reg, feat)?;
        Ok((c, r))
    }

    /// Tracking forward pass on graph inputs `z:[3,Hz,Wz]`, `x:[3,Hx,Wx]`.
    pub fn forward_graph(&self, g: &mut Graph<F>, z: Var, x: Var) -> Result<(Var, Var)> {
        let (zt, xt) = self.backbone(g, z, x)?;
        self.head_graph(g, zt, xt)
    }

    pub fn forward(&self, z: &Tensor<F>, x: &Tensor<F>) -> Result<Prediction<F>> {
        self.check_image(z, self.config.template_size, "template")?;
        self.check_image(x, self.config.search_size, "search image")?;
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let xv = g.constant(x.clone());
        let (c, r) = self.forward_graph(&mut g, zv, xv)?;
        Ok(Prediction { cls: g.value(c).clone(), reg: g.value(r).clone() })
    }

    /// Forward pass recording both branches after every step.
    pub fn trace(&self, z: &Tensor<F>, x: &Tensor<F>) -> Result<Trace<F>> {
        self.check_image(z, self.config.template_size, "template")?;
        self.check_image(x, self.config.search_size, "search image")?;
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let xv = g.constant(x.clone());
        let zt = Tokens::from_chw(&mut g, zv)?;
        let xt = Tokens::from_chw(&mut g, xv)?;
        let steps = self.steps();
        let (mut zs, mut xs) = (Vec::new(), Vec::new());
        let (zt, xt) = self.run_steps(&mut g, 0, steps.len(), Some(zt), Some(xt), |g, _, z, x| {
            zs.push(z.expect("template branch present").to_feature_map(g)?);
            xs.push(x.expect("search branch present").to_feature_map(g)?);
            Ok(())
        })?;
        let (c, r) = self.head_graph(&mut g, zt.expect("template branch"), xt.expect("search branch"))?;
        let prediction = Prediction { cls: g.value(c).clone(), reg: g.value(r).clone() };
        Ok(Trace { steps, z: zs, x: xs, prediction })
    }

    /// Recomputes the prediction from features captured before `steps[from]`.
    pub fn resume(&self, from: usize, z: &FeatureMap<F>, x: &FeatureMap<F>) -> Result<Prediction<F>> {
        let mut g = Graph::inference();
        let zt = z.to_tokens(&mut g, false)?;
        let xt = x.to_tokens(&mut g, false)?;
        let n = self.steps().len();
        let (zt, xt) = self.run_steps(&mut g, from, n, Some(zt), Some(xt), |_, _, _, _| Ok(()))?;
        let (c, r) = self.head_graph(&mut g, zt.expect("template branch"), xt.expect("search branch"))?;
        Ok(Prediction { cls: g.value(c).clone(), reg: g.value(r).clone() })
    }

    /// Runs the template branch as far as it is independent of the search image.
    pub fn encode_template(&self, z: &Tensor<F>) -> Result<TemplateCache<F>> {
        self.check_image(z, self.config.template_size, "template")?;
        let mut g = Graph::inference();
        let zv = g.constant(z.clone());
        let zt = Tokens::from_chw(&mut g, zv)?;
        let next_step = self.first_cross_step();
        let (zt, _) = self.run_steps(&mut g, 0, next_step, Some(zt), None, |_, _, _, _| Ok(()))?;
        Ok(TemplateCache { next_step, features: zt.expect("template branch").to_feature_map(&mut g)? })
    }

    /// Same result as [`Model::forward`] with the cached template.
    pub fn forward_cached(&self, cache: &TemplateCache<F>, x: &Tensor<F>) -> Result<Prediction<F>> {
        self.check_image(x, self.config.search_size, "search image")?;
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let xt = Tokens::from_chw(&mut g, xv)?;
        let k = cache.next_step;
        let (_, xt) = self.run_steps(&mut g, 0, k, None, Some(xt), |_, _, _, _| Ok(()))?;
        let zt = cache.features.to_tokens(&mut g, false)?;
        let n = self.steps().len();
        let (zt, xt) = self.run_steps(&mut g, k, n, Some(zt), xt, |_, _, _, _| Ok(()))?;
        let (c, r) = self.head_graph(&mut g, zt.expect("template branch"), xt.expect("search branch"))?;
        Ok(Prediction { cls: g.value(c).clone(), reg: g.value(r).clone() })
    }

    /// Class logits `[classes]`: average-pooled last-stage tokens, LN, linear.
    pub fn classify_graph(&self, g: &mut Graph<F>, img: Var) -> Result<Var> {
        let Heads::Classifier { norm, fc } = &self.heads else {
            return Err(contract_err!("tracking model has no classification head"));
        };
        let t = Tokens::from_chw(g, img)?;
        let n = self.steps().len();
        let (_, t) = self.run_steps(g, 0, n, None, Some(t), |_, _, _, _| Ok(()))?;
        let t = t.expect("image branch present");
        let pooled = g.sum_rows(t.var)?;
        let pooled = g.scale(pooled, 1.0 / t.len() as f64);
        let c = g.shape(pooled)[0];
        let row = g.reshape(pooled, &[1, c])?;
        let row = norm.apply(g, &self.store, row)?;
        let logits = fc.apply(g, &self.store, row)?;
        let k = g.shape(logits)[1];
        g.reshape(logits, &[k])
    }

    pub fn forward_classification(&self, img: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_image(img, self.config.template_size, "image")?;
        let mut g = Graph::inference();
        let v = g.constant(img.clone());
        let out = self.classify_graph(&mut g, v)?;
        Ok(g.value(out).clone())
    }
}

/// Per-channel correlation of the search map with the template map as kernel,
/// zero-padded so the output keeps the search grid; scaled by `1/(hz·wz)`.
pub fn depthwise_xcorr<F: Float>(g: &mut Graph<F>, z: Tokens, x: Tokens) -> Result<Tokens> {
    let c = z.channels(g);
    let zc = z.to_chw(g)?;
    let kernel = g.reshape(zc, &[c, 1, z.h, z.w])?;
    let xc = x.to_chw(g)?;
    let (top, left) = (z.h / 2, z.w / 2);
    let padded = g.pad2d(xc, top, z.h - 1 - top, left, z.w - 1 - left)?;
    let corr = g.depthwise_conv2d(padded, kernel, PadMode::Valid)?;
    let corr = g.scale(corr, 1.0 / (z.h * z.w) as f64);
    Tokens::from_chw(g, corr)
}
