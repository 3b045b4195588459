//! Three-phase optimisation.
//!
//! Every outer epoch runs
//!
//! 1. the backbone embeddings on `L_bpr + λ3·L_diff-ssl + λ4·‖Θ‖²` (the
//!    diffusion network trains alongside on its own ELBO),
//! 2. the embeddings and predictor on the information-bottleneck loss,
//! 3. both view generators on `L_gen + L_den`,
//!
//! then regenerates the two views, refreshes the historical EMA state and
//! scores the validation split.

pub mod baseline;
pub mod config;
pub mod optim;
pub mod run;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde_json::{json, Value};

pub use baseline::{train_bpr_mf, BaselineOutcome};
pub use config::{DiffuseSide, TrainConfig, Variant};
pub use optim::Adam;
pub use run::{RunDir, RunManifest};

use crate::contrastive::{self, diff_ssl_loss, ib_loss, AclBatch, AclPredictor, HistoricalState, ViewRows};
use crate::dataset::{InteractionDataset, Split};
use crate::denoise::{self, concrete_loss, den_loss, denoised_propagation, Denoiser, GraphInputs};
use crate::diffusion::{self, build_schedule, denoise_embeddings, elbo_loss, DenoiserNet, NoiseSchedule};
use crate::encoder::{self, bpr_loss, propagate_tape, sample_bpr_triples, EmbeddingState, Propagation, TrainIndex, Triple};
use crate::error::{Error, Result};
use crate::eval::{all_ranking_evaluate, MetricReport};
use crate::graph::{build_normalized_adjacency, NormalizedAdjacency};
use crate::numerics::{Bound, CsrMatrix, Params, RngStream, Tape, Tensor, Var};
use crate::vgae::{self, Vgae};

/// Cut-offs reported for every evaluation.
pub const KS: [usize; 2] = [20, 40];

const USER: usize = 0;
const ITEM: usize = 1;

/// The second view generator: the relation-aware denoiser, or a VGAE in
/// the gen+gen ablation.
#[derive(Clone, Debug, PartialEq)]
pub enum SecondGenerator {
    Denoiser(Denoiser),
    Vgae(Vgae),
}

impl SecondGenerator {
    pub fn params(&self) -> &Params {
        match self {
            SecondGenerator::Denoiser(d) => d.params(),
            SecondGenerator::Vgae(v) => v.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut Params {
        match self {
            SecondGenerator::Denoiser(d) => d.params_mut(),
            SecondGenerator::Vgae(v) => v.params_mut(),
        }
    }
}

/// Edge values of the two frozen views used by phases 1 and 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    /// VGAE view, shared by every layer.
    pub gen: Vec<f64>,
    /// Second view, one value vector per layer.
    pub den: Vec<Vec<f64>>,
}

/// Mean losses of one phase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseStats {
    pub steps: usize,
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
    pub parts: BTreeMap<String, f64>,
}

impl PhaseStats {
    fn push_loss(&mut self, phase: usize, epoch: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite phase {phase} loss at epoch {epoch} step {}: {v}",
                self.losses.len()
            )));
        }
        self.losses.push(v);
        self.add("loss", v);
        Ok(())
    }

    fn add(&mut self, name: &str, v: f64) {
        *self.parts.entry(name.to_string()).or_insert(0.0) += v;
    }

    fn finish(mut self, steps: usize) -> Self {
        self.steps = steps;
        if steps > 0 {
            self.parts.values_mut().for_each(|v| *v /= steps as f64);
        }
        self
    }

    pub fn loss(&self) -> f64 {
        self.parts.get("loss").copied().unwrap_or(0.0)
    }

    fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        m.insert("steps".into(), json!(self.steps));
        m.insert("step_losses".into(), json!(self.losses));
        for (k, v) in &self.parts {
            m.insert(k.clone(), json!(v));
        }
        Value::Object(m)
    }
}

struct Optimizers {
    p1: Adam,
    p2_backbone: Adam,
    p2_predictor: Adam,
    vgae: Adam,
    second: Adam,
    net: Adam,
}

/// Full training state.
pub struct Model {
    cfg: TrainConfig,
    adj: NormalizedAdjacency,
    index: TrainIndex,
    backbone: Params,
    vgae: Vgae,
    second: SecondGenerator,
    net: DenoiserNet,
    predictor: AclPredictor,
    history: HistoricalState,
    schedule: NoiseSchedule,
    views: Views,
    opt: Optimizers,
    root: RngStream,
    epoch: usize,
}

fn col(v: &[f64]) -> Tensor {
    Tensor::column(v.to_vec())
}

/// Distinct values in first-appearance order.
fn unique(xs: impl Iterator<Item = usize>, n: usize) -> Vec<usize> {
    let mut seen = vec![false; n];
    xs.filter(|&x| !std::mem::replace(&mut seen[x], true)).collect()
}

fn stack_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.rows() + b.rows(), a.cols(), data)
}

// stream labels for RngStream::derive
const S_INIT: u64 = 1;
const S_PHASE1: u64 = 2;
const S_PHASE2: u64 = 3;
const S_PHASE3: u64 = 4;
const S_VIEWS: u64 = 5;

impl Model {
    pub fn new(ds: &InteractionDataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adj = build_normalized_adjacency(ds, cfg.use_weights)?;
        let index = TrainIndex::new(ds);
        let root = RngStream::new(cfg.seed);
        let mut init = root.derive(&[S_INIT]);
        let e0 = EmbeddingState::init(ds.n_users(), ds.n_items(), cfg.dim, &mut init);
        let mut backbone = Params::new();
        backbone.add("user", e0.user.clone());
        backbone.add("item", e0.item.clone());
        let vgae = Vgae::new(cfg.dim, &mut init);
        let second = match cfg.variant.second_scorer() {
            Some(kind) => SecondGenerator::Denoiser(Denoiser::new(kind, cfg.layers, cfg.dim, cfg.att_hidden, &mut init)),
            None => SecondGenerator::Vgae(Vgae::new(cfg.dim, &mut init)),
        };
        let net = DenoiserNet::new(cfg.dim, cfg.diff_hidden, cfg.time_dim, &mut init);
        let predictor = AclPredictor::new(cfg.dim, &mut init);
        let history = HistoricalState::new(&e0, cfg.ema_decay)?;
        let schedule = build_schedule(cfg.diff_steps, cfg.diff_s, cfg.alpha_low, cfg.alpha_up)?;
        let opt = Optimizers {
            p1: Adam::new(cfg.lr),
            p2_backbone: Adam::new(cfg.lr),
            p2_predictor: Adam::new(cfg.lr),
            vgae: Adam::new(cfg.gen_lr),
            second: Adam::new(cfg.gen_lr),
            net: Adam::new(cfg.diff_lr),
        };
        let mut model = Self {
            cfg: cfg.clone(),
            views: Views {
                gen: adj.values().to_vec(),
                den: vec![adj.values().to_vec(); cfg.layers],
            },
            adj,
            index,
            backbone,
            vgae,
            second,
            net,
            predictor,
            history,
            schedule,
            opt,
            root,
            epoch: 0,
        };
        model.refresh_views()?;
        Ok(model)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adj
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn views(&self) -> &Views {
        &self.views
    }

    pub fn backbone(&self) -> &Params {
        &self.backbone
    }

    pub fn backbone_mut(&mut self) -> &mut Params {
        &mut self.backbone
    }

    pub fn vgae(&self) -> &Vgae {
        &self.vgae
    }

    pub fn second(&self) -> &SecondGenerator {
        &self.second
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn predictor(&self) -> &AclPredictor {
        &self.predictor
    }

    pub fn history(&self) -> &HistoricalState {
        &self.history
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Checksum of all generator parameters (both views).
    pub fn generator_checksum(&self) -> u64 {
        self.vgae.params().checksum() ^ self.second.params().checksum().rotate_left(29)
    }

    /// Current `E0` tables.
    pub fn embeddings(&self) -> EmbeddingState {
        EmbeddingState {
            user: self.backbone.get(USER).clone(),
            item: self.backbone.get(ITEM).clone(),
        }
    }

    /// Final embeddings over the clean training graph, used for ranking.
    pub fn final_embeddings(&self) -> Result<Propagation> {
        encoder::propagate_uniform(self.adj.matrix(), &self.embeddings(), self.cfg.layers)
    }

    pub fn evaluate(&self, ds: &InteractionDataset, split: Split) -> Result<MetricReport> {
        let p = self.final_embeddings()?;
        Ok(all_ranking_evaluate(&p.user, &p.item, ds, split, &KS)?.0)
    }

    fn stream(&self, phase: u64, step: usize) -> RngStream {
        self.root.derive(&[phase, self.epoch as u64, step as u64])
    }

    fn layer_cols(&self, tape: &Tape) -> (Var, Vec<Var>) {
        let g = tape.constant(col(&self.views.gen));
        let d = self.views.den.iter().map(|v| tape.constant(col(v))).collect();
        (g, d)
    }

    /// Regenerates both views from the current generators and embeddings.
    pub fn refresh_views(&mut self) -> Result<()> {
        let mut rng = self.stream(S_VIEWS, 0);
        let e0 = self.embeddings();
        let gen = vgae::generate_view(&self.vgae, &self.adj, &e0, Some(&mut rng))?;
        let den = match &self.second {
            SecondGenerator::Denoiser(d) => denoise::generate_denoised_view(d, &self.adj, &e0, None)?
                .into_iter()
                .map(|m| m.matrix.values().to_vec())
                .collect(),
            SecondGenerator::Vgae(v) => {
                let view = vgae::generate_view(v, &self.adj, &e0, Some(&mut rng))?;
                vec![view.values().to_vec(); self.cfg.layers]
            }
        };
        self.views = Views {
            gen: gen.values().to_vec(),
            den,
        };
        Ok(())
    }

    /// Phase 1 over `phase1_steps` minibatches.
    pub fn run_phase1(&mut self) -> Result<PhaseStats> {
        let frozen = self.generator_checksum();
        let mut stats = PhaseStats::default();
        for step in 0..self.cfg.phase1_steps {
            let mut rng = self.stream(S_PHASE1, step);
            self.phase1_step(&mut rng, &mut stats)?;
        }
        isolation("phase 1", "view generators", frozen, self.generator_checksum())?;
        Ok(stats.finish(self.cfg.phase1_steps))
    }

    fn phase1_step(&mut self, rng: &mut RngStream, stats: &mut PhaseStats) -> Result<()> {
        let cfg = self.cfg.clone();
        let tape = Tape::new();
        let b = self.backbone.bind(&tape, true);
        let (eu, ev) = (b.var(USER), b.var(ITEM));
        let pattern = Arc::clone(self.adj.pattern());
        let adj = tape.constant(col(self.adj.values()));
        let main = propagate_tape(&tape, &pattern, &vec![adj; cfg.layers], eu, ev)?;
        let triples = sample_bpr_triples(&self.index, cfg.batch_size, rng)?;
        let users = Arc::new(unique(triples.iter().map(|t| t.user), self.adj.n_users()));
        let items = Arc::new(unique(triples.iter().map(|t| t.pos), self.adj.n_items()));
        let bpr = bpr_loss(&tape, main.user, main.item, &triples)?;
        stats.add("bpr", tape.item(bpr)?);
        let mut loss = bpr;
        let diffusion_on = cfg.variant.uses_diffusion();
        let mut diff_batch = None;
        if cfg.lambda3 > 0.0 {
            let (g, d) = self.layer_cols(&tape);
            let v1 = propagate_tape(&tape, &pattern, &vec![g; cfg.layers], eu, ev)?;
            let v2 = propagate_tape(&tape, &pattern, &d, eu, ev)?;
            let rows = |p: &encoder::TapePropagation| -> Result<ViewRows> {
                Ok(ViewRows {
                    user: tape.gather_rows(p.user, Arc::clone(&users))?,
                    item: tape.gather_rows(p.item, Arc::clone(&items))?,
                })
            };
            let (r1, r2) = (rows(&v1)?, rows(&v2)?);
            let denoised = if diffusion_on {
                let net = self.net.on_tape(&tape, false);
                let mut den = |r: ViewRows| -> Result<ViewRows> {
                    let side = |x: Var, on: bool, rng: &mut RngStream| {
                        if on {
                            denoise_embeddings(&tape, &net, x, &self.schedule, cfg.denoise_steps, Some(rng))
                        } else {
                            Ok(x)
                        }
                    };
                    Ok(ViewRows {
                        user: side(r.user, cfg.diffuse.users(), rng)?,
                        item: side(r.item, cfg.diffuse.items(), rng)?,
                    })
                };
                Some((den(r1)?, den(r2)?))
            } else {
                None
            };
            let ssl = diff_ssl_loss(&tape, r1, r2, denoised, cfg.lambda1, cfg.lambda2, cfg.tau)?;
            stats.add("ssl", tape.item(ssl.ssl)?);
            if let (Some(intra), Some(inter)) = (ssl.intra, ssl.inter) {
                stats.add("intra", tape.item(intra)?);
                stats.add("inter", tape.item(inter)?);
            }
            loss = tape.add(loss, tape.scale(ssl.total, cfg.lambda3)?)?;
            if diffusion_on {
                let val = |v: Var| tape.value(v).clone();
                diff_batch = Some((
                    stack_rows(&val(r1.user), &val(r2.user))?,
                    stack_rows(&val(r1.item), &val(r2.item))?,
                ));
            }
        }
        if cfg.lambda4 > 0.0 {
            loss = tape.add(loss, tape.scale(b.l2(&tape)?, cfg.lambda4)?)?;
        }
        if cfg.ddr_weight > 0.0 && diffusion_on {
            let net = self.net.on_tape(&tape, false);
            let rows = tape.gather_rows(main.item, Arc::clone(&items))?;
            let ddr = diffusion::ddr_regularizer(&tape, &net, rows, &self.schedule, self.epoch, cfg.warmup_epochs, cfg.ddr_weight, rng)?;
            stats.add("ddr", tape.item(ddr)?);
            loss = tape.add(loss, ddr)?;
        }
        stats.push_loss(1, self.epoch, tape.item(loss)?)?;
        let mut grads = tape.backward(loss)?;
        let g = b.grads(&mut grads, &self.backbone);
        self.opt.p1.step(&mut self.backbone, &g)?;
        if let Some((u, i)) = diff_batch {
            let elbo = self.train_diffusion(u, i, rng)?;
            stats.add("elbo", elbo);
        }
        Ok(())
    }

    /// One ELBO step of the diffusion network on detached view rows.
    fn train_diffusion(&mut self, users: Tensor, items: Tensor, rng: &mut RngStream) -> Result<f64> {
        let tape = Tape::new();
        let net = self.net.on_tape(&tape, true);
        let mut terms = Vec::new();
        if self.cfg.diffuse.users() {
            terms.push(elbo_loss(&tape, &net, tape.constant(users), &self.schedule, rng)?);
        }
        if self.cfg.diffuse.items() {
            terms.push(elbo_loss(&tape, &net, tape.constant(items), &self.schedule, rng)?);
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let value = tape.item(loss)?;
        let bound = net.bound.clone();
        let mut grads = tape.backward(loss)?;
        let g = bound.grads(&mut grads, self.net.params());
        self.opt.net.step(self.net.params_mut(), &g)?;
        Ok(value)
    }

    /// Phase 2 over `phase2_steps` minibatches; skipped by variants without it.
    pub fn run_phase2(&mut self) -> Result<PhaseStats> {
        let steps = if self.cfg.variant.uses_ib_phase() {
            self.cfg.phase2_steps
        } else {
            0
        };
        let mut stats = PhaseStats::default();
        if steps == 0 {
            return Ok(stats);
        }
        let hist = self.history.state().clone();
        let gen = self.adj.matrix().with_values(self.views.gen.clone())?;
        let dens: Vec<CsrMatrix> = self
            .views
            .den
            .iter()
            .map(|v| self.adj.matrix().with_values(v.clone()))
            .collect::<Result<_>>()?;
        let y_gen = encoder::propagate(&vec![&gen; self.cfg.layers], &hist)?;
        let y_den = encoder::propagate(&dens.iter().collect::<Vec<_>>(), &hist)?;
        let y_gen = stack_rows(&y_gen.user, &y_gen.item)?;
        let y_den = stack_rows(&y_den.user, &y_den.item)?;
        let frozen = (self.generator_checksum(), self.history.state().checksum());
        for step in 0..steps {
            let mut rng = self.stream(S_PHASE2, step);
            self.phase2_step(&y_gen, &y_den, &mut rng, &mut stats)?;
        }
        isolation("phase 2", "view generators", frozen.0, self.generator_checksum())?;
        isolation("phase 2", "historical state", frozen.1, self.history.state().checksum())?;
        Ok(stats.finish(steps))
    }

    fn acl_anchors(&self, triples: &[Triple], rng: &mut RngStream) -> (Arc<Vec<usize>>, Vec<Vec<usize>>) {
        let n = self.adj.n_users();
        let cap = self.cfg.acl_max_neighbors;
        let mut anchors = unique(triples.iter().map(|t| t.user), n);
        anchors.extend(unique(triples.iter().map(|t| t.pos), self.adj.n_items()).into_iter().map(|i| n + i));
        let neighbors = anchors
            .iter()
            .map(|&a| {
                let mut nb: Vec<usize> = if a < n {
                    self.adj.user_neighbors(a).iter().map(|&i| n + i).collect()
                } else {
                    self.adj.item_neighbors(a - n).to_vec()
                };
                if nb.len() > cap {
                    rng.shuffle(&mut nb);
                    nb.truncate(cap);
                    nb.sort_unstable();
                }
                nb
            })
            .collect();
        (Arc::new(anchors), neighbors)
    }

    fn phase2_step(&mut self, y_gen: &Tensor, y_den: &Tensor, rng: &mut RngStream, stats: &mut PhaseStats) -> Result<()> {
        let cfg = self.cfg.clone();
        let tape = Tape::new();
        let b = self.backbone.bind(&tape, true);
        let pb = self.predictor.params().bind(&tape, true);
        let pattern = Arc::clone(self.adj.pattern());
        let (g, d) = self.layer_cols(&tape);
        let hat_gen = propagate_tape(&tape, &pattern, &vec![g; cfg.layers], b.var(USER), b.var(ITEM))?;
        let hat_den = propagate_tape(&tape, &pattern, &d, b.var(USER), b.var(ITEM))?;
        let triples = sample_bpr_triples(&self.index, cfg.batch_size, rng)?;
        let (anchors, neighbors) = self.acl_anchors(&triples, rng);
        let side = |y: &Tensor, hat: &encoder::TapePropagation| -> Result<AclBatch> {
            let identity = tape.constant(y.gather_rows(&anchors));
            Ok(AclBatch {
                identity,
                predicted: contrastive::predict(&tape, &pb, identity)?,
                context: tape.concat_rows(&[hat.user, hat.item])?,
                neighbors: neighbors.clone(),
            })
        };
        let gen_side = side(y_gen, &hat_gen)?;
        let den_side = side(y_den, &hat_den)?;
        let loss = ib_loss(&tape, &gen_side, &den_side, cfg.lambda_ratio, cfg.tau)?;
        stats.push_loss(2, self.epoch, tape.item(loss)?)?;
        let mut grads = tape.backward(loss)?;
        let gb = b.grads(&mut grads, &self.backbone);
        let gp = pb.grads(&mut grads, self.predictor.params());
        self.opt.p2_backbone.step(&mut self.backbone, &gb)?;
        self.opt.p2_predictor.step(self.predictor.params_mut(), &gp)?;
        Ok(())
    }

    /// Phase 3 over `phase3_steps` minibatches; the backbone is read-only.
    pub fn run_phase3(&mut self) -> Result<PhaseStats> {
        let frozen = self.embeddings().checksum();
        let mut stats = PhaseStats::default();
        for step in 0..self.cfg.phase3_steps {
            let mut rng = self.stream(S_PHASE3, step);
            self.phase3_step(&mut rng, &mut stats)?;
        }
        isolation("phase 3", "backbone", frozen, self.embeddings().checksum())?;
        Ok(stats.finish(self.cfg.phase3_steps))
    }

    fn phase3_step(&mut self, rng: &mut RngStream, stats: &mut PhaseStats) -> Result<()> {
        let cfg = self.cfg.clone();
        let tape = Tape::new();
        let eu = tape.constant(self.backbone.get(USER).clone());
        let ev = tape.constant(self.backbone.get(ITEM).clone());
        let vb = self.vgae.params().bind(&tape, true);
        let sb = self.second.params().bind(&tape, true);
        let gin = GraphInputs::new(&tape, &self.adj);
        let triples = sample_bpr_triples(&self.index, cfg.batch_size, rng)?;
        let l_gen = vgae_objective(&tape, &vb, &gin, eu, ev, &triples, &cfg, rng, stats, "gen")?;
        let l_den = match &self.second {
            SecondGenerator::Vgae(_) => vgae_objective(&tape, &sb, &gin, eu, ev, &triples, &cfg, rng, stats, "gen2")?,
            SecondGenerator::Denoiser(den) => {
                let dt = denoised_propagation(&tape, &sb, den, &gin, eu, ev, Some(rng))?;
                let lc = concrete_loss(&tape, &dt.probs)?;
                let per_edge = tape.scale(lc, cfg.concrete_weight / (self.adj.n_edges() * cfg.layers) as f64)?;
                let bpr = bpr_loss(&tape, dt.propagation.user, dt.propagation.item, &triples)?;
                stats.add("concrete", tape.item(per_edge)?);
                stats.add("den_bpr", tape.item(bpr)?);
                den_loss(&tape, per_edge, bpr, sb.l2(&tape)?, cfg.lambda2_reg)?
            }
        };
        let loss = tape.add(l_gen, l_den)?;
        stats.push_loss(3, self.epoch, tape.item(loss)?)?;
        let mut grads = tape.backward(loss)?;
        let gv = vb.grads(&mut grads, self.vgae.params());
        let gs = sb.grads(&mut grads, self.second.params());
        self.opt.vgae.step(self.vgae.params_mut(), &gv)?;
        self.opt.second.step(self.second.params_mut(), &gs)?;
        Ok(())
    }

    /// Closes an outer epoch: new views, EMA refresh, epoch counter.
    pub fn end_epoch(&mut self) -> Result<()> {
        self.refresh_views()?;
        let e = self.embeddings();
        self.history.update(&e)?;
        self.epoch += 1;
        Ok(())
    }

    fn view_summary(&self) -> Value {
        let mean = |v: &[f64]| {
            let (s, a): (f64, f64) = v.iter().zip(self.adj.values()).fold((0.0, 0.0), |acc, (x, a)| (acc.0 + x, acc.1 + a));
            if a > 0.0 {
                s / a
            } else {
                0.0
            }
        };
        let nonzero: Vec<usize> = self
            .views
            .den
            .iter()
            .map(|v| v.iter().filter(|&&x| x != 0.0).count())
            .collect();
        json!({
            "gen_mass": mean(&self.views.gen),
            "den_mass": self.views.den.iter().map(|v| mean(v)).collect::<Vec<_>>(),
            "den_nonzero": nonzero,
        })
    }
}

fn isolation(phase: &str, what: &str, before: u64, after: u64) -> Result<()> {
    if before != after {
        return Err(Error::Contract(format!("{phase} modified the {what}")));
    }
    Ok(())
}

/// `L_gen` for one VGAE on a tape: KL + discriminative + BPR over its view
/// + weight decay.
#[allow(clippy::too_many_arguments)]
fn vgae_objective(
    tape: &Tape,
    b: &Bound,
    gin: &GraphInputs,
    eu: Var,
    ev: Var,
    triples: &[Triple],
    cfg: &TrainConfig,
    rng: &mut RngStream,
    stats: &mut PhaseStats,
    tag: &str,
) -> Result<Var> {
    let lat = vgae::vgae_encode(tape, b, &gin.pattern, gin.adj, eu, ev, Some(rng))?;
    let kl = vgae::kl_loss(tape, &[(lat.user.mean, lat.user.std), (lat.item.mean, lat.item.std)])?;
    let pos: Vec<_> = triples.iter().map(|t| (t.user, t.pos)).collect();
    let neg: Vec<_> = triples.iter().map(|t| (t.user, t.neg)).collect();
    let dis = vgae::discriminative_loss(tape, b, lat.user.z, lat.item.z, &pos, &neg)?;
    let vals = vgae::view_values(tape, b, &lat, &gin.pattern, gin.adj)?;
    let prop = propagate_tape(tape, &gin.pattern, &vec![vals; cfg.layers], eu, ev)?;
    let bpr = bpr_loss(tape, prop.user, prop.item, triples)?;
    stats.add(&format!("{tag}_kl"), tape.item(kl)?);
    stats.add(&format!("{tag}_dis"), tape.item(dis)?);
    stats.add(&format!("{tag}_bpr"), tape.item(bpr)?);
    vgae::gen_loss(tape, kl, dis, bpr, b.l2(tape)?, cfg.lambda2_reg)
}

/// Best-validation snapshot.
#[derive(Clone, Debug)]
pub struct BestState {
    pub epoch: usize,
    pub valid: MetricReport,
    pub embeddings: EmbeddingState,
}

pub struct TrainOutcome {
    pub model: Model,
    pub best: Option<BestState>,
    /// Metric records, one JSON line per epoch.
    pub log: Vec<String>,
}

impl TrainOutcome {
    /// Final embeddings of the best-validation state (or the last state when
    /// no epoch ran).
    pub fn best_final_embeddings(&self) -> Result<Propagation> {
        let e = self.best.as_ref().map_or_else(|| self.model.embeddings(), |b| b.embeddings.clone());
        encoder::propagate_uniform(self.model.adj.matrix(), &e, self.model.cfg.layers)
    }

    pub fn evaluate(&self, ds: &InteractionDataset, split: Split) -> Result<MetricReport> {
        let p = self.best_final_embeddings()?;
        Ok(all_ranking_evaluate(&p.user, &p.item, ds, split, &KS)?.0)
    }
}

fn metrics_json(r: &MetricReport) -> Value {
    json!({ "users": r.users, "metrics": r.metrics })
}

/// Runs `cfg.epochs` outer rounds and tracks the best validation
/// Recall@20, checkpointing it into `run` when given.
pub fn train(ds: &InteractionDataset, cfg: &TrainConfig, mut run: Option<&mut RunDir>) -> Result<TrainOutcome> {
    let mut model = Model::new(ds, cfg)?;
    let mut best: Option<BestState> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let p1 = model.run_phase1()?;
        let p2 = model.run_phase2()?;
        let p3 = model.run_phase3()?;
        model.end_epoch()?;
        let valid = model.evaluate(ds, Split::Valid)?;
        let record = json!({
            "epoch": epoch,
            "variant": cfg.variant.name(),
            "phase1": p1.to_json(),
            "phase2": p2.to_json(),
            "phase3": p3.to_json(),
            "views": model.view_summary(),
            "valid": metrics_json(&valid),
        });
        let line = serde_json::to_string(&record)?;
        if let Some(r) = run.as_deref_mut() {
            r.append_metrics(&line)?;
        }
        log.push(line);
        let improved = best.as_ref().is_none_or(|b| valid.recall(20) > b.valid.recall(20));
        if improved {
            let embeddings = model.embeddings();
            if let Some(r) = run.as_deref_mut() {
                r.checkpoint(epoch, &embeddings, cfg.layers)?;
            }
            best = Some(BestState {
                epoch,
                valid,
                embeddings,
            });
        }
    }
    Ok(TrainOutcome { model, best, log })
}
