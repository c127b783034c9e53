//! Sequential task training: per-task optimization of the combined
//! generation + routing-distillation objective, post-task freezing and
//! snapshotting, and layer-wise threshold pruning of redundant experts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{add_noise, forward_graph, DenoiserModel, Momentum, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::moe::{
    attention_graph, compose_weight_graph_with, gate_coefficients, gate_scores_graph,
    select_and_normalize, ExpertVars, GateVars, GatingNetwork, SelectionMode, SelectionResult,
};
use crate::numerics::RealArray;
use crate::rng::substream;
use crate::text::{ConceptEmbeddingBank, TokenEmbeddingTable, TokenId, Vocabulary};

/// One task: a new concept with its few-shot image set.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub index: usize,
    pub class_word: String,
    pub images: Vec<RealArray>,
    pub prompt_template: String,
    pub palette: [f64; 3],
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.images.len() < 3 || self.images.len() > 8 {
            return Err(Error::Domain(format!(
                "task {} needs 3-8 images, got {}",
                self.index,
                self.images.len()
            )));
        }
        Ok(())
    }
}

/// Per-task training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the routing-distillation term.
    pub beta: f64,
    /// Experts activated per selection (on top of the forced expert 0).
    pub k_active: usize,
    /// Pruning threshold on the new expert's own coefficient.
    pub prune_threshold: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr_experts: f64,
    pub lr_tokens: f64,
    pub momentum: f64,
    /// Noise scale for concept-token warm starts.
    pub concept_init_noise: f64,
    /// Dense softmax over every expert instead of selective activation.
    pub dense_routing: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            k_active: 2,
            prune_threshold: 0.15,
            iterations: 800,
            batch: 2,
            lr_experts: 0.05,
            lr_tokens: 0.02,
            momentum: 0.9,
            concept_init_noise: 0.01,
            dense_routing: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return Err(Error::Config("train.prune_threshold must lie in [0,1]".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("train.beta must be nonnegative".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        if self.k_active == 0 {
            return Err(Error::Config("train.k_active must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("train.batch must be at least 1".into()));
        }
        Ok(())
    }
}

/// Metadata kept per completed task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptMeta {
    pub class_word: String,
    pub prompt: Vec<TokenId>,
    pub palette: [f64; 3],
}

/// Frozen routing state for one concept at the end of its task: raw gating
/// scores and the inference-mode selection, per layer. Replaying the stored
/// selection reproduces that task's generations bit for bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingSnapshot {
    pub scores: Vec<RealArray>,
    pub selection: Vec<SelectionResult>,
}

/// One pruning decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneRecord {
    pub task: usize,
    pub layer: usize,
    pub alpha_own: f64,
    pub retained: bool,
    pub params_removed: usize,
}

/// Whether a new expert survives: kept exactly when its own coefficient
/// reaches the threshold.
pub fn prune_keeps(alpha_own: f64, threshold: f64) -> bool {
    alpha_own >= threshold
}

/// Per-task training outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub class_word: String,
    pub loss_init: f64,
    pub loss_final: f64,
    pub distill_init: f64,
    pub distill_final: f64,
    pub alpha_own: Vec<f64>,
    pub pruned_layers: Vec<usize>,
}

/// The full lifelong learner state: frozen backbone, expert registries,
/// gating networks, token table, snapshot bank, and bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptLearner {
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub vocab: Vocabulary,
    pub table: TokenEmbeddingTable,
    pub bank: ConceptEmbeddingBank,
    pub concepts: Vec<ConceptMeta>,
    pub routing_snapshots: Vec<RoutingSnapshot>,
    pub prune_ledger: Vec<PruneRecord>,
    pub backbone_hash: String,
    pub completed_tasks: usize,
}

impl ConceptLearner {
    /// Wrap a pretrained model; the backbone hash recorded here must never
    /// change again.
    pub fn new(
        model: DenoiserModel,
        schedule: NoiseSchedule,
        vocab: Vocabulary,
        table: TokenEmbeddingTable,
    ) -> Self {
        let backbone_hash = model.backbone_hash();
        Self {
            model,
            schedule,
            vocab,
            table,
            bank: ConceptEmbeddingBank::new(),
            concepts: Vec::new(),
            routing_snapshots: Vec::new(),
            prune_ledger: Vec::new(),
            backbone_hash,
            completed_tasks: 0,
        }
    }

    /// Context embedding of the null prompt (unconditional branch).
    pub fn null_context(&self) -> RealArray {
        let id = self.vocab.base_id(crate::text::NULL_WORD).expect("null word in vocabulary");
        self.table.encode(&self.vocab, &[id]).expect("null context")
    }

    /// Inference-mode selections for a context, one per layer.
    pub fn infer_selections(
        &self,
        context: &RealArray,
        k: usize,
        dense: bool,
    ) -> Result<Vec<SelectionResult>> {
        self.model
            .layers
            .iter()
            .map(|layer| {
                let scores = gate_coefficients(context, &layer.gate)?;
                if dense {
                    dense_selection(&scores)
                } else {
                    select_and_normalize(&scores, None, k, SelectionMode::Infer)
                }
            })
            .collect()
    }

    /// Raw gating scores for a context, one vector per layer.
    pub fn gate_scores(&self, context: &RealArray) -> Result<Vec<RealArray>> {
        self.model
            .layers
            .iter()
            .map(|layer| gate_coefficients(context, &layer.gate))
            .collect()
    }

    /// Worst-case drift of the gating outputs on stored concepts: the max
    /// absolute difference between current scores and each concept's frozen
    /// snapshot, over the columns that existed at snapshot time.
    pub fn gating_drift(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for (tau, snap) in self.routing_snapshots.iter().enumerate() {
            let now = self.gate_scores(self.bank.entry(tau)?)?;
            for (cur, old) in now.iter().zip(&snap.scores) {
                for (c, o) in cur.data().iter().take(old.len()).zip(old.data()) {
                    worst = worst.max((c - o).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Bit-stable digest of every stored parameter and record.
    pub fn state_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        fn eat(hasher: &mut Sha256, a: &RealArray) {
            for v in a.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let mut hasher = Sha256::new();
        for p in self.model.backbone_params() {
            eat(&mut hasher, p);
        }
        for layer in &self.model.layers {
            for reg in [&layer.k_proj.experts, &layer.v_proj.experts] {
                for e in reg.entries().iter().filter(|e| e.retained) {
                    eat(&mut hasher, &e.down);
                    eat(&mut hasher, &e.up);
                }
            }
            eat(&mut hasher, &layer.gate.w1);
            eat(&mut hasher, &layer.gate.b1);
            eat(&mut hasher, &layer.gate.w2);
            eat(&mut hasher, &layer.gate.b2);
        }
        eat(&mut hasher, self.table.base_rows());
        for s in 0..self.table.concept_count() {
            eat(&mut hasher, self.table.concept_row(s));
        }
        for tau in 0..self.bank.len() {
            eat(&mut hasher, self.bank.entry(tau).unwrap());
        }
        for snap in &self.routing_snapshots {
            for s in &snap.scores {
                eat(&mut hasher, s);
            }
            for sel in &snap.selection {
                for &i in &sel.indices {
                    hasher.update((i as u64).to_le_bytes());
                }
                eat(&mut hasher, &sel.alphas);
            }
        }
        for rec in &self.prune_ledger {
            hasher.update((rec.task as u64).to_le_bytes());
            hasher.update((rec.layer as u64).to_le_bytes());
            hasher.update(rec.alpha_own.to_le_bytes());
            hasher.update([rec.retained as u8]);
        }
        let mut hex = String::with_capacity(64);
        for byte in hasher.finalize() {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }

    /// Train one task end to end: optimize, freeze, snapshot, prune.
    pub fn train_task(&mut self, task: &TaskSpec, config: &TrainConfig) -> Result<TaskReport> {
        task.validate()?;
        config.validate()?;
        if task.index != self.completed_tasks {
            return Err(Error::State(format!(
                "task {} out of order (next is {})",
                task.index, self.completed_tasks
            )));
        }
        for layer in &self.model.layers {
            if layer.k_proj.experts.entries().iter().any(|e| !e.frozen) {
                return Err(Error::State("previous task is not frozen".into()));
            }
        }

        // distillation targets from the pre-growth gating snapshot
        let gate_snapshot: Vec<GatingNetwork> =
            self.model.layers.iter().map(|l| l.gate.clone()).collect();
        let mut targets: Vec<Vec<RealArray>> = Vec::new(); // [tau][layer]
        for tau in 0..self.bank.len() {
            let ctx = self.bank.entry(tau)?;
            let per_layer = gate_snapshot
                .iter()
                .map(|net| gate_coefficients(ctx, net))
                .collect::<Result<Vec<_>>>()?;
            targets.push(per_layer);
        }

        // register the concept token and grow every layer
        let mut init_rng = substream(config.seed, "task-init", task.index as u64);
        self.table.register_concept(
            &self.vocab,
            &task.class_word,
            config.concept_init_noise,
            &mut init_rng,
        )?;
        let slot = self.table.concept_count() - 1;
        let prompt = build_prompt(&self.vocab, &task.prompt_template, slot, &task.class_word)?;
        let current_cols: Vec<usize> = {
            let rank = self.model.dims.expert_rank;
            let mut cols = Vec::new();
            for layer in &mut self.model.layers {
                cols.push(layer.grow(task.index, rank, 0.01, &mut init_rng)?);
            }
            cols
        };

        // optimizer slots: per layer [k.down, k.up, v.down, v.up, w1, b1, w2, b2] + token row
        let n_layers = self.model.layers.len();
        let mut opt_experts = Momentum::new(config.lr_experts, config.momentum, 8 * n_layers);
        let mut opt_token = Momentum::new(config.lr_tokens, config.momentum, 1);

        let mut rng = substream(config.seed, "task-train", task.index as u64);
        let mut report = TaskReport {
            task: task.index,
            class_word: task.class_word.clone(),
            loss_init: 0.0,
            loss_final: 0.0,
            distill_init: 0.0,
            distill_final: 0.0,
            alpha_own: Vec::new(),
            pruned_layers: Vec::new(),
        };

        for iter in 0..config.iterations {
            let (loss, gen, distill) =
                self.train_step(task, config, slot, &prompt, &current_cols, &targets, &mut rng, &mut opt_experts, &mut opt_token)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at task {} iteration {iter}",
                    task.index
                )));
            }
            if iter == 0 {
                report.loss_init = gen;
                report.distill_init = distill;
            }
            if iter + 1 == config.iterations {
                report.loss_final = gen;
                report.distill_final = distill;
            }
        }

        // freeze the task everywhere
        for layer in &mut self.model.layers {
            layer.freeze_task(task.index);
        }
        self.table.freeze_concept(slot);
        let context = self.table.encode(&self.vocab, &prompt)?;
        self.bank.snapshot(task.index, context.clone())?;
        self.concepts.push(ConceptMeta {
            class_word: task.class_word.clone(),
            prompt,
            palette: task.palette,
        });
        self.completed_tasks += 1;

        // layer-wise pruning from the final training-mode pass on C_n
        let prune = self.prune_task(task.index, config)?;
        for rec in &prune {
            report.alpha_own.push(rec.alpha_own);
            if !rec.retained {
                report.pruned_layers.push(rec.layer);
            }
        }
        self.prune_ledger.extend(prune);

        // post-prune routing snapshot for this concept
        let ctx = self.bank.entry(task.index)?;
        let scores = self.gate_scores(ctx)?;
        let selection = self.infer_selections(ctx, config.k_active, config.dense_routing)?;
        self.routing_snapshots.push(RoutingSnapshot { scores, selection });

        // freeze contract: the backbone must be bitwise unchanged
        if self.model.backbone_hash() != self.backbone_hash {
            return Err(Error::State("backbone changed during task training".into()));
        }
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_step(
        &mut self,
        task: &TaskSpec,
        config: &TrainConfig,
        slot: usize,
        prompt: &[TokenId],
        current_cols: &[usize],
        targets: &[Vec<RealArray>],
        rng: &mut impl Rng,
        opt_experts: &mut Momentum,
        opt_token: &mut Momentum,
    ) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let model_vars = crate::denoiser::ModelVars::constants(&mut g, &self.model);

        // context rows: frozen rows as constants, the current concept row as
        // the one trainable embedding leaf
        let d = self.vocab.d_in();
        let token_leaf = g.leaf(self.table.concept_row(slot).reshaped(vec![1, d]));
        let mut row_vars = Vec::with_capacity(prompt.len());
        for &id in prompt {
            if self.vocab.slot_of(id) == Some(slot) {
                row_vars.push(token_leaf);
            } else {
                let row = self.table.encode(&self.vocab, &[id])?;
                row_vars.push(g.constant(row));
            }
        }
        let context = g.concat_rows(&row_vars);

        // per-layer gating, selection, and composed K/V
        let mut gate_vars = Vec::with_capacity(self.model.layers.len());
        let mut composed = Vec::with_capacity(self.model.layers.len());
        let mut alpha_vars = Vec::with_capacity(self.model.layers.len());
        let mut expert_leaves = Vec::with_capacity(self.model.layers.len());
        for (li, layer) in self.model.layers.iter().enumerate() {
            let gv = GateVars::leaves(&mut g, &layer.gate);
            let scores = gate_scores_graph(&mut g, context, &gv);
            let width = layer.gate.width();
            let plain = g.value(scores).reshaped(vec![width]);
            let sel = if config.dense_routing {
                dense_selection(&plain)?
            } else {
                select_and_normalize(&plain, Some(current_cols[li]), config.k_active, SelectionMode::Train)?
            };
            let sel_scores = g.select_cols(scores, &sel.indices);
            let alphas_2d = g.softmax_rows(sel_scores);
            let alphas = g.reshape(alphas_2d, vec![sel.indices.len()]);

            let cur = layer.k_proj.experts.by_column(current_cols[li])?;
            let k_down = g.leaf(cur.down.clone());
            let k_up = g.leaf(cur.up.clone());
            let cur_v = layer.v_proj.experts.by_column(current_cols[li])?;
            let v_down = g.leaf(cur_v.down.clone());
            let v_up = g.leaf(cur_v.up.clone());
            let wk = compose_weight_graph_with(
                &mut g,
                &layer.k_proj,
                &sel.indices,
                alphas,
                Some(ExpertVars { column: current_cols[li], down: k_down, up: k_up }),
            )?;
            let wv = compose_weight_graph_with(
                &mut g,
                &layer.v_proj,
                &sel.indices,
                alphas,
                Some(ExpertVars { column: current_cols[li], down: v_down, up: v_up }),
            )?;
            gate_vars.push(gv);
            composed.push((wk, wv));
            alpha_vars.push(alphas);
            expert_leaves.push([k_down, k_up, v_down, v_up]);
        }

        // generation loss over the batch
        let mut loss_terms = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let img = &task.images[rng.gen_range(0..task.images.len())];
            let t = rng.gen_range(0..self.schedule.t_total());
            let noise = RealArray::randn(img.shape(), 1.0, rng);
            let zt = add_noise(img, t, &noise, &self.schedule)?;
            let xv = g.constant(zt);
            let pred = forward_graph(&mut g, &model_vars, xv, t, &self.model.dims, |g, la| {
                let (wk, wv) = composed[la.layer];
                attention_graph(g, la.rows, context, la.wq, wk, wv)
            });
            let nv = g.constant(noise);
            let diff = g.sub(pred, nv);
            let sq = g.mul(diff, diff);
            loss_terms.push(g.mean_all(sq));
        }
        let mut gen_loss = loss_terms[0];
        for &term in &loss_terms[1..] {
            gen_loss = g.add(gen_loss, term);
        }
        let gen_loss = g.scale(gen_loss, 1.0 / config.batch as f64);

        // routing distillation against the pre-task snapshot
        let mut distill: Option<Var> = None;
        for (tau, per_layer) in targets.iter().enumerate() {
            let ctx = g.constant(self.bank.entry(tau)?.clone());
            for (li, target) in per_layer.iter().enumerate() {
                let out = gate_scores_graph(&mut g, ctx, &gate_vars[li]);
                let prefix_cols: Vec<usize> = (0..target.len()).collect();
                let prefix = g.select_cols(out, &prefix_cols);
                let tv = g.constant(target.reshaped(vec![1, target.len()]));
                let dv = g.sub(prefix, tv);
                let sq = g.mul(dv, dv);
                let term = g.sum_all(sq);
                distill = Some(match distill {
                    Some(acc) => g.add(acc, term),
                    None => term,
                });
            }
        }
        let distill_value = distill.map_or(0.0, |v| g.scalar_value(v));
        let total = match distill {
            Some(dv) => {
                let scaled = g.scale(dv, config.beta);
                g.add(gen_loss, scaled)
            }
            None => gen_loss,
        };

        let loss_value = g.scalar_value(total);
        let gen_value = g.scalar_value(gen_loss);
        let grads = g.backward(total);

        // apply updates
        for (li, layer) in self.model.layers.iter_mut().enumerate() {
            let [k_down, k_up, v_down, v_up] = expert_leaves[li];
            let cur = layer.k_proj.experts.by_column_mut(current_cols[li])?;
            let gd = grads.of(k_down, cur.down.shape());
            opt_experts.step(8 * li, &mut cur.down, &gd);
            let gu = grads.of(k_up, cur.up.shape());
            opt_experts.step(8 * li + 1, &mut cur.up, &gu);
            let cur = layer.v_proj.experts.by_column_mut(current_cols[li])?;
            let gd = grads.of(v_down, cur.down.shape());
            opt_experts.step(8 * li + 2, &mut cur.down, &gd);
            let gu = grads.of(v_up, cur.up.shape());
            opt_experts.step(8 * li + 3, &mut cur.up, &gu);

            let gv = gate_vars[li];
            let gw1 = grads.of(gv.w1, layer.gate.w1.shape());
            opt_experts.step(8 * li + 4, &mut layer.gate.w1, &gw1);
            let gb1 = grads.of(gv.b1, layer.gate.b1.shape());
            opt_experts.step(8 * li + 5, &mut layer.gate.b1, &gb1);
            let gw2 = grads.of(gv.w2, layer.gate.w2.shape());
            opt_experts.step(8 * li + 6, &mut layer.gate.w2, &gw2);
            let gb2 = grads.of(gv.b2, layer.gate.b2.shape());
            opt_experts.step(8 * li + 7, &mut layer.gate.b2, &gb2);
        }
        let token_grad = grads.of(token_leaf, &[1, d]).reshaped(vec![d]);
        opt_token.step(0, self.table.concept_row_mut(slot), &token_grad);

        Ok((loss_value, gen_value, distill_value))
    }

    /// Per-layer pruning decision for a frozen task: recompute the
    /// training-mode coefficient of the task's own expert on `C_n`, and
    /// structurally remove the expert wherever it falls below the threshold.
    pub fn prune_task(&mut self, task: usize, config: &TrainConfig) -> Result<Vec<PruneRecord>> {
        let ctx = self.bank.entry(task)?.clone();
        let mut records = Vec::with_capacity(self.model.layers.len());
        for (li, layer) in self.model.layers.iter_mut().enumerate() {
            let col = layer
                .k_proj
                .experts
                .column_of_task(task)
                .ok_or_else(|| Error::State(format!("task {task} has no expert in layer {li}")))?;
            let scores = gate_coefficients(&ctx, &layer.gate)?;
            let sel = if config.dense_routing {
                dense_selection(&scores)?
            } else {
                select_and_normalize(&scores, Some(col), config.k_active, SelectionMode::Train)?
            };
            let alpha_own = sel.alpha_of(col).unwrap_or(0.0);
            let retained = prune_keeps(alpha_own, config.prune_threshold);
            let mut params_removed = 0;
            if !retained {
                params_removed = layer.k_proj.experts.by_column(col)?.param_count()
                    + layer.v_proj.experts.by_column(col)?.param_count()
                    + layer.gate.hidden()
                    + 1;
                layer.prune_task(task)?;
            }
            records.push(PruneRecord { task, layer: li, alpha_own, retained, params_removed });
        }
        Ok(records)
    }

    /// Train every task in order.
    pub fn run_sequence<F>(
        &mut self,
        tasks: &[TaskSpec],
        config: &TrainConfig,
        mut on_task: F,
    ) -> Result<Vec<TaskReport>>
    where
        F: FnMut(&ConceptLearner, &TaskReport) -> Result<()>,
    {
        let mut reports = Vec::with_capacity(tasks.len());
        for task in tasks {
            let report = self.train_task(task, config)?;
            on_task(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Sample a learned concept with a fixed seed. With `replay` the frozen
    /// routing snapshot is used instead of the live gating network, which
    /// pins old-concept generation bit for bit.
    pub fn sample_concept(
        &self,
        concept: usize,
        steps: usize,
        guidance: f64,
        seed: u64,
        replay: bool,
        k_active: usize,
        dense: bool,
    ) -> Result<RealArray> {
        let context = self.bank.entry(concept)?;
        let selections = if replay {
            self.routing_snapshots
                .get(concept)
                .ok_or_else(|| Error::State(format!("no routing snapshot for concept {concept}")))?
                .selection
                .clone()
        } else {
            self.infer_selections(context, k_active, dense)?
        };
        let cond = crate::denoiser::Conditioning::Composed { context, selections: &selections };
        crate::denoiser::ddim_sample(
            &self.model,
            &self.schedule,
            &cond,
            &self.null_context(),
            steps,
            guidance,
            seed,
        )
    }
}

/// Dense routing over all retained experts (selective activation disabled):
/// softmax over every score, no forced inclusion, no top-K.
pub fn dense_selection(scores: &RealArray) -> Result<SelectionResult> {
    let width = scores.len();
    let alphas = crate::numerics::softmax(scores)?;
    Ok(SelectionResult { indices: (0..width).collect(), alphas })
}

/// Standalone routing-distillation loss between a gating set and its
/// predecessor snapshot, over every stored concept embedding: the summed
/// squared difference restricted to the columns the snapshot knows.
pub fn routing_distillation_loss(
    current: &[GatingNetwork],
    snapshot: &[GatingNetwork],
    bank: &ConceptEmbeddingBank,
) -> Result<f64> {
    let mut total = 0.0;
    for tau in 0..bank.len() {
        let ctx = bank.entry(tau)?;
        for (cur, old) in current.iter().zip(snapshot) {
            let now = gate_coefficients(ctx, cur)?;
            let target = gate_coefficients(ctx, old)?;
            for (a, b) in now.data().iter().take(target.len()).zip(target.data()) {
                total += (a - b) * (a - b);
            }
        }
    }
    Ok(total)
}

/// Expand a prompt template: `{concept}` becomes the concept token,
/// `{class}` the class word.
pub fn build_prompt(
    vocab: &Vocabulary,
    template: &str,
    slot: usize,
    class_word: &str,
) -> Result<Vec<TokenId>> {
    let rendered = template
        .replace("{concept}", &format!("<V*{slot}>"))
        .replace("{class}", class_word);
    vocab.tokenize(&rendered)
}
