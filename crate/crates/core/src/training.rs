//! Model assembly, frozen-network pretraining and the alternating
//! generator/discriminator training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::data::{Dataset, EpochSampler};
use crate::discriminator::{r1_gradient_surrogate, r1_penalty, Discriminator};
use crate::embeddings::{copy_params, FrozenHashes, FrozenNets, IdentityNet, StyleEncoder};
use crate::error::{ensure_param, Error, Result};
use crate::generator::{mask_input, sample_latents, Generator};
use crate::losses::{self, LossParts};
use crate::masks::{self, BinaryMask};
use crate::nn::{EqualLinear, ParamStore};
use crate::ops;
use crate::optim::Adam;
use crate::styles::{mix_styles, mixing_regularization, MappingNetwork, StyleAverage, StyleCode};
use crate::svgl::svgl_apply;

pub const DTYPE: DType = DType::F32;

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// All networks of one run. Not `Clone`: parameter handles share storage.
#[derive(Debug)]
pub struct Model {
    pub config: Config,
    pub g_store: ParamStore,
    pub generator: Generator,
    pub f_store: ParamStore,
    pub mapping: MappingNetwork,
    pub d_store: ParamStore,
    pub disc: Discriminator,
    pub frozen: FrozenNets,
    pub w_avg: StyleAverage,
}

impl Model {
    /// Random initialisation, deterministic in `config.train.seed`.
    pub fn build(config: &Config) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let m = &config.model;
        let mut g_store = ParamStore::new(DTYPE, true);
        let generator = Generator::new(&mut g_store, m, &mut component_rng(seed, 1))?;
        let mut f_store = ParamStore::new(DTYPE, true);
        let mapping = MappingNetwork::new(
            &mut f_store,
            m.style_dim,
            m.mapping_layers,
            m.mapping_lr_mul,
            m.num_layers(),
            &mut component_rng(seed, 2),
        )?;
        let mut d_store = ParamStore::new(DTYPE, true);
        let disc = Discriminator::new(&mut d_store, m, &mut component_rng(seed, 3))?;
        let frozen = FrozenNets::new(m, &config.frozen, DTYPE, &mut component_rng(seed, 4))?;
        let w_avg = StyleAverage::new(m.style_dim, config.train.w_avg_decay);
        Ok(Self { config: config.clone(), g_store, generator, f_store, mapping, d_store, disc, frozen, w_avg })
    }

    /// Random initialisation followed by pretraining of the style encoder
    /// (latent regression through the initial generator) and, when the data
    /// carries identity labels, of the identity embedder.
    pub fn initialize(config: &Config, data: &Dataset) -> Result<Self> {
        let model = Self::build(config)?;
        model.pretrain_encoder()?;
        if let Some(labels) = data.identities() {
            model.pretrain_identity(data, labels)?;
        }
        Ok(model)
    }

    pub fn frozen_hashes(&self) -> Result<FrozenHashes> {
        self.frozen.hashes()
    }

    /// SHA-256 over every network and the running style average.
    pub fn parameter_hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for store in [&self.g_store, &self.f_store, &self.d_store] {
            h.update(store.hash()?.as_bytes());
        }
        let f = self.frozen_hashes()?;
        h.update(serde_json::to_string(&f)?.as_bytes());
        for v in self.w_avg.values() {
            h.update(v.to_le_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn pretrain_encoder(&self) -> Result<()> {
        let cfg = &self.config;
        let steps = cfg.frozen.encoder_pretrain_steps;
        if steps == 0 {
            return Ok(());
        }
        let mut rng = component_rng(cfg.train.seed, 5);
        let mut store = ParamStore::new(DTYPE, true);
        let encoder = StyleEncoder::new(&mut store, &cfg.model, &cfg.frozen, &mut component_rng(cfg.train.seed, 4))?;
        copy_params(&self.frozen.encoder_store, &store)?;
        let mut opt = Adam::new(cfg.frozen.pretrain_lr, 0.9, 0.99);
        let (b, r, s) = (cfg.frozen.pretrain_batch, cfg.model.resolution, cfg.model.style_dim);
        let zeros = Tensor::zeros((b, 3, r, r), DTYPE, &Device::Cpu)?;
        let ones = Tensor::ones((b, 1, r, r), DTYPE, &Device::Cpu)?;
        for _ in 0..steps {
            let z1 = sample_latents(&mut rng, b, s, DTYPE)?;
            let z2 = sample_latents(&mut rng, b, s, DTYPE)?;
            let (w, _) = mixing_regularization(&z1, &z2, &mut rng, 0.9, &self.mapping)?;
            let w = w.detach();
            let img = self.generator.generate(&zeros, &ones, &w, rng.random())?.detach();
            let pred = encoder.encode_style(&img)?;
            let loss = (pred.tensor() - w.tensor())?.sqr()?.mean_all()?;
            opt.step(&[&store], &loss.backward()?)?;
        }
        copy_params(&store, &self.frozen.encoder_store)
    }

    fn pretrain_identity(&self, data: &Dataset, labels: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let steps = cfg.frozen.identity_pretrain_steps;
        let classes = data.num_identities();
        if steps == 0 || classes < 2 {
            return Ok(());
        }
        let mut rng = component_rng(cfg.train.seed, 6);
        let mut store = ParamStore::new(DTYPE, true);
        let net = IdentityNet::new(&mut store, &cfg.model, &cfg.frozen, &mut component_rng(cfg.train.seed, 4))?;
        copy_params(&self.frozen.identity_store, &store)?;
        let mut head_store = ParamStore::new(DTYPE, true);
        let head = EqualLinear::new(&mut head_store, "identity.head", net.dim(), classes, 0.0, 1.0, &mut rng)?;
        let mut opt = Adam::new(cfg.frozen.pretrain_lr, 0.9, 0.99);
        let b = cfg.frozen.pretrain_batch;
        for _ in 0..steps {
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
            let x = data.batch(&idx)?;
            let lab: Vec<u32> = idx.iter().map(|&i| labels[i] as u32).collect();
            let lab = Tensor::from_vec(lab, (b, 1), &Device::Cpu)?;
            let emb = net.embed(&x)?;
            let norm = (emb.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-8)?;
            let logits = (head.forward(&emb.broadcast_div(&norm)?)? * 8.0)?;
            let lse = logits.exp()?.sum_keepdim(1)?.log()?;
            let picked = logits.gather(&lab, 1)?;
            let loss = (lse - picked)?.mean_all()?;
            opt.step(&[&store, &head_store], &loss.backward()?)?;
        }
        copy_params(&store, &self.frozen.identity_store)
    }

    /// Style layers for each exemplar image.
    pub fn encode_style(&self, img: &Tensor) -> Result<StyleCode> {
        self.frozen.encoder.encode_style(img)
    }
}

/// Draws the exemplar for sample `idx`: with probability `tau` the sample
/// itself, otherwise a uniformly chosen different image.
pub fn draw_exemplar<R: Rng + ?Sized>(rng: &mut R, idx: usize, len: usize, tau: f64) -> (usize, bool) {
    let r: f64 = rng.random();
    if r > tau && len > 1 {
        let j = rng.random_range(0..len - 1);
        (if j >= idx { j + 1 } else { j }, false)
    } else {
        (idx, true)
    }
}

/// One assembled training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub exemplars: Vec<usize>,
    pub same_flags: Vec<bool>,
    pub masks: Vec<BinaryMask>,
    pub i_gt: Tensor,
    pub i_exe: Tensor,
    pub i_in: Tensor,
    pub mask: Tensor,
    pub m_w: Tensor,
    pub m_bar_w: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
}

pub fn assemble_batch<R: Rng + ?Sized>(
    data: &Dataset,
    sampler: &mut EpochSampler,
    rng: &mut R,
    cfg: &Config,
) -> Result<Batch> {
    ensure_param!(!data.is_empty(), "dataset is empty");
    let t = &cfg.train;
    let r = cfg.model.resolution;
    ensure_param!(data.resolution() == r, "dataset resolution {} differs from model {r}", data.resolution());
    let mut indices = Vec::with_capacity(t.batch_size);
    let mut exemplars = Vec::with_capacity(t.batch_size);
    let mut same_flags = Vec::with_capacity(t.batch_size);
    let mut bin = Vec::with_capacity(t.batch_size);
    let mut conf = Vec::with_capacity(t.batch_size);
    let mut rev = Vec::with_capacity(t.batch_size);
    for _ in 0..t.batch_size {
        let idx = sampler.next_index(rng);
        let (exe, same) = draw_exemplar(rng, idx, data.len(), t.tau);
        let m = masks::sample_freeform(rng, r, r, &t.brush)?;
        let mw = masks::confidence_weight(&m, t.blur.kernel, t.blur.sigma)?;
        rev.push(masks::reverse_weight(&mw, &m)?);
        conf.push(mw);
        bin.push(m);
        indices.push(idx);
        exemplars.push(exe);
        same_flags.push(same);
    }
    let i_gt = data.batch(&indices)?;
    let i_exe = data.batch(&exemplars)?;
    let mask = masks::stack_binary(&bin, DTYPE, &Device::Cpu)?;
    let i_in = mask_input(&i_gt, &mask)?;
    let s = cfg.model.style_dim;
    let z1 = sample_latents(rng, t.batch_size, s, DTYPE)?;
    let z2 = sample_latents(rng, t.batch_size, s, DTYPE)?;
    Ok(Batch {
        indices,
        exemplars,
        same_flags,
        masks: bin,
        i_gt,
        i_exe,
        i_in,
        mask,
        m_w: masks::stack_weights(&conf, DTYPE, &Device::Cpu)?,
        m_bar_w: masks::stack_weights(&rev, DTYPE, &Device::Cpu)?,
        z1,
        z2,
    })
}

/// Loss values of one step. `r1` is present on regularisation steps only.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub g_adv: f64,
    pub id: f64,
    pub lpips: f64,
    pub attr: f64,
    pub g_total: f64,
    pub d_adv: f64,
    pub r1: Option<f64>,
}

impl StepReport {
    pub const TERMS: [&'static str; 7] = ["g_adv", "id", "lpips", "attr", "g_total", "d_adv", "r1"];

    fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.g_adv),
            Some(self.id),
            Some(self.lpips),
            Some(self.attr),
            Some(self.g_total),
            Some(self.d_adv),
            self.r1,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().flatten().all(|v| v.is_finite())
    }

    /// One newline-delimited record per loss term.
    pub fn records(&self) -> String {
        let mut s = String::new();
        for (name, v) in Self::TERMS.iter().zip(self.values()) {
            let rec = serde_json::json!({ "step": self.step, "loss": name, "value": v });
            s.push_str(&rec.to_string());
            s.push('\n');
        }
        s
    }
}

/// Mutable training state; everything needed for bit-identical resumption.
#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub sampler: EpochSampler,
}

impl TrainState {
    pub fn new(model: Model, dataset_len: usize) -> Self {
        let t = &model.config.train;
        let opt_g = Adam::new(t.lr, t.beta1, t.beta2);
        let opt_d = Adam::new(t.lr, t.beta1, t.beta2);
        let rng = component_rng(t.seed, 7);
        Self { model, opt_g, opt_d, step: 0, rng, sampler: EpochSampler::new(dataset_len) }
    }

    pub fn config(&self) -> &Config {
        &self.model.config
    }
}

/// Generator/mapping update followed by a discriminator update.
pub fn train_step(state: &mut TrainState, data: &Dataset) -> Result<StepReport> {
    let cfg = state.model.config.clone();
    let t = &cfg.train;
    let batch = assemble_batch(data, &mut state.sampler, &mut state.rng, &cfg)?;
    let model = &state.model;
    let cond = |m: &Tensor| if model.disc.is_conditional() { Some(m.clone()) } else { None };
    let dmask = cond(&batch.mask);

    // Generator and mapping network.
    let w_exe = model.encode_style(&batch.i_exe)?.detach();
    let (w_tilde, _) = mixing_regularization(&batch.z1, &batch.z2, &mut state.rng, t.mix_prob, &model.mapping)?;
    let w_hat = mix_styles(&w_exe, &w_tilde, &t.phi)?;
    let noise_seed: u64 = state.rng.random();
    let (_, i_out) = model.generator.generate_parts(&batch.i_in, &batch.mask, &w_hat, noise_seed)?;
    let adv = losses::adv_loss_g(&model.disc.discriminate(&i_out, dmask.as_ref())?)?;
    let id = losses::identity_loss(&i_out, &batch.i_exe, &model.frozen.identity)?;
    let lp_in = svgl_apply(&i_out, &batch.m_w)?;
    let lpips = losses::lpips_loss(&lp_in, &batch.i_gt, &model.frozen.perceptual, &batch.same_flags)?;
    let attr_in = svgl_apply(&i_out, &batch.m_bar_w)?;
    let attr = losses::attribute_loss(&attr_in, &w_hat, &t.phi, &model.frozen.encoder)?;
    let parts = LossParts { adv, id, lpips, attr };
    let g_total = losses::total_objective(&parts, &t.loss)?;
    let mut report = StepReport {
        step: state.step,
        g_adv: ops::scalar_f64(&parts.adv)?,
        id: ops::scalar_f64(&parts.id)?,
        lpips: ops::scalar_f64(&parts.lpips)?,
        attr: ops::scalar_f64(&parts.attr)?,
        g_total: ops::scalar_f64(&g_total)?,
        d_adv: 0.0,
        r1: None,
    };
    if !report.all_finite() {
        return Err(Error::Numeric(format!("non-finite generator loss: {report:?}")));
    }
    let grads = g_total.backward()?;
    state.opt_g.step(&[&model.g_store, &model.f_store], &grads)?;
    state.model.w_avg.update(&w_tilde.layer(0)?)?;
    let model = &state.model;

    // Discriminator with lazy R1.
    let fake = i_out.detach();
    let real_logits = model.disc.discriminate(&batch.i_gt, dmask.as_ref())?;
    let fake_logits = model.disc.discriminate(&fake, dmask.as_ref())?;
    let mut d_loss = losses::adv_loss_d(&real_logits, &fake_logits, 0.0)?;
    report.d_adv = ops::scalar_f64(&d_loss)?;
    if state.step.is_multiple_of(t.r1_interval) {
        let f = |x: &Tensor| model.disc.discriminate(x, dmask.as_ref());
        let r1 = r1_penalty(f, &batch.i_gt, t.loss.gamma)?;
        report.r1 = Some(r1.penalty);
        if let Some(s) = r1_gradient_surrogate(f, &batch.i_gt, &r1, t.loss.gamma, t.r1_interval as f64)? {
            d_loss = (d_loss + s)?;
        }
    }
    if !report.all_finite() {
        return Err(Error::Numeric(format!("non-finite discriminator loss: {report:?}")));
    }
    let grads = d_loss.backward()?;
    state.opt_d.step(&[&model.d_store], &grads)?;
    state.step += 1;
    Ok(report)
}

/// Where a run writes checkpoints and its loss log.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn latest(&self) -> PathBuf {
        self.dir.join("latest.safetensors")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoint-{step:08}.safetensors"))
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("losses.ndjson")
    }

    /// Drops log records from steps at or after `step` (used on resume).
    fn truncate_log(&self, step: u64) -> Result<()> {
        let path = self.loss_log();
        if !path.exists() {
            return Ok(());
        }
        let lines = BufReader::new(File::open(&path)?).lines().collect::<std::io::Result<Vec<_>>>()?;
        let kept: Vec<String> = lines
            .into_iter()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                    .is_some_and(|s| s < step)
            })
            .collect();
        let mut f = BufWriter::new(File::create(&path)?);
        for l in kept {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Runs steps until `state.step == until`, checkpointing every
/// `checkpoint_every` steps and at the end when `run` is given.
pub fn train_until(
    state: &mut TrainState,
    data: &Dataset,
    until: u64,
    run: Option<&RunDir>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<()> {
    let mut log = match run {
        Some(r) => {
            std::fs::create_dir_all(&r.dir)?;
            r.truncate_log(state.step)?;
            Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(r.loss_log())?))
        }
        None => None,
    };
    let every = state.config().train.checkpoint_every;
    while state.step < until {
        let report = train_step(state, data).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("step {}: {io}", state.step))),
            other => other,
        })?;
        if let Some(l) = log.as_mut() {
            l.write_all(report.records().as_bytes())?;
        }
        on_step(&report);
        if let Some(r) = run {
            if every > 0 && state.step.is_multiple_of(every) {
                if let Some(l) = log.as_mut() {
                    l.flush()?;
                }
                crate::checkpoint::save(state, r.checkpoint(state.step))?;
                crate::checkpoint::save(state, r.latest())?;
            }
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    if let Some(r) = run {
        crate::checkpoint::save(state, r.latest())?;
    }
    Ok(())
}

/// Fresh run: initialise, train `total_steps`, return the final state.
pub fn train(config: &Config, data: &Dataset, run: Option<&RunDir>) -> Result<TrainState> {
    let model = Model::initialize(config, data)?;
    let mut state = TrainState::new(model, data.len());
    if let Some(r) = run {
        std::fs::create_dir_all(&r.dir)?;
        crate::checkpoint::save(&state, r.checkpoint(0))?;
    }
    train_until(&mut state, data, config.train.total_steps, run, |_| {})?;
    Ok(state)
}

/// Continues from the latest checkpoint in `run` up to `total_steps`.
pub fn resume(run: &RunDir, data: &Dataset, total_steps: Option<u64>) -> Result<TrainState> {
    let mut state = crate::checkpoint::load(run.latest())?;
    let until = total_steps.unwrap_or(state.config().train.total_steps);
    train_until(&mut state, data, until, Some(run), |_| {})?;
    Ok(state)
}

/// Loads the training dataset described by `config.data`, or the held-out
/// split of the synthetic distribution when `holdout` is set.
pub fn load_dataset(config: &Config, holdout: bool) -> Result<Dataset> {
    let d = &config.data;
    let r = config.model.resolution;
    if !d.path.is_empty() {
        return Dataset::load_dir(Path::new(&d.path), r);
    }
    if holdout {
        Dataset::synthetic(r, d.synthetic_images, d.holdout_images, d.synthetic_identities, d.seed)
    } else {
        Dataset::synthetic(r, 0, d.synthetic_images, d.synthetic_identities, d.seed)
    }
}
