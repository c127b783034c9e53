//! Gated low-rank experts over frozen attention projections.
//!
//! Each cross-attention layer owns a frozen base K and V matrix, an ordered
//! registry of low-rank experts per matrix, and one gating network shared by
//! both. Selection picks the auxiliary expert 0 always, the in-training
//! expert while a task runs, and the top scoring prior experts otherwise;
//! coefficients are a softmax over the selected scores only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::numerics::RealArray;

/// Additive low-rank adapter `E = down · up` for one projection matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LowRankExpert {
    pub down: RealArray,
    pub up: RealArray,
    /// Task that trained this expert; `None` for the auxiliary expert 0.
    pub owner_task: Option<usize>,
    pub frozen: bool,
    pub retained: bool,
}

impl LowRankExpert {
    pub fn dense(&self) -> RealArray {
        crate::numerics::matmul_kernel(&self.down, &self.up)
    }

    pub fn param_count(&self) -> usize {
        self.down.len() + self.up.len()
    }
}

/// Ordered expert list for one projection matrix. Entry 0 is the auxiliary
/// expert; pruned entries stay as tombstones so column order never shifts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertRegistry {
    experts: Vec<LowRankExpert>,
}

impl ExpertRegistry {
    /// Registry holding only the frozen auxiliary expert, both factors drawn
    /// at the given scale so the adapter is a genuine nonzero alternative.
    pub fn with_aux<R: Rng>(d_in: usize, d_out: usize, rank: usize, scale: f64, rng: &mut R) -> Self {
        let aux = LowRankExpert {
            down: RealArray::randn(&[d_in, rank], scale, rng),
            up: RealArray::randn(&[rank, d_out], scale, rng),
            owner_task: None,
            frozen: true,
            retained: true,
        };
        Self { experts: vec![aux] }
    }

    pub fn entries(&self) -> &[LowRankExpert] {
        &self.experts
    }

    pub fn total_created(&self) -> usize {
        self.experts.len()
    }

    /// Number of retained experts (the gating width).
    pub fn width(&self) -> usize {
        self.experts.iter().filter(|e| e.retained).count()
    }

    /// Registry index of the expert at a gating column.
    fn entry_index(&self, column: usize) -> Result<usize> {
        self.experts
            .iter()
            .enumerate()
            .filter(|(_, e)| e.retained)
            .nth(column)
            .map(|(i, _)| i)
            .ok_or_else(|| Error::State(format!("selection references pruned or unknown column {column}")))
    }

    pub fn by_column(&self, column: usize) -> Result<&LowRankExpert> {
        Ok(&self.experts[self.entry_index(column)?])
    }

    pub fn by_column_mut(&mut self, column: usize) -> Result<&mut LowRankExpert> {
        let i = self.entry_index(column)?;
        Ok(&mut self.experts[i])
    }

    /// Gating column of the retained expert owned by `task`, if any.
    pub fn column_of_task(&self, task: usize) -> Option<usize> {
        self.experts
            .iter()
            .filter(|e| e.retained)
            .position(|e| e.owner_task == Some(task))
    }

    /// Append a trainable expert for `task`: seeded Gaussian down, zero up,
    /// so a fresh expert contributes nothing until trained.
    pub fn grow<R: Rng>(
        &mut self,
        task: usize,
        d_in: usize,
        d_out: usize,
        rank: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<usize> {
        if self.experts.iter().any(|e| !e.frozen) {
            return Err(Error::State("cannot grow registry while an expert is in training".into()));
        }
        self.experts.push(LowRankExpert {
            down: RealArray::randn(&[d_in, rank], scale, rng),
            up: RealArray::zeros(&[rank, d_out]),
            owner_task: Some(task),
            frozen: false,
            retained: true,
        });
        Ok(self.width() - 1)
    }

    pub fn freeze_task(&mut self, task: usize) {
        for e in &mut self.experts {
            if e.owner_task == Some(task) {
                e.frozen = true;
            }
        }
    }

    /// Structurally remove the newest expert (owned by `task`).
    pub fn prune_task(&mut self, task: usize) -> Result<()> {
        let last = self
            .experts
            .last_mut()
            .ok_or_else(|| Error::State("empty registry".into()))?;
        if last.owner_task != Some(task) {
            return Err(Error::State(format!("newest expert is not owned by task {task}")));
        }
        last.retained = false;
        Ok(())
    }
}

/// Mean-pool + two-layer tanh perceptron producing one raw score per
/// retained expert of its layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatingNetwork {
    pub w1: RealArray,
    pub b1: RealArray,
    pub w2: RealArray,
    pub b2: RealArray,
}

impl GatingNetwork {
    /// Width-1 network (expert 0 only): random hidden layer, zero output
    /// layer so every initial score is zero.
    pub fn init<R: Rng>(d_in: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: RealArray::randn(&[d_in, hidden], (1.0 / d_in as f64).sqrt(), rng),
            b1: RealArray::zeros(&[hidden]),
            w2: RealArray::zeros(&[hidden, 1]),
            b2: RealArray::zeros(&[1]),
        }
    }

    pub fn width(&self) -> usize {
        self.w2.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Add one zero-initialized output column; old columns are copied.
    pub fn grow_column(&mut self) {
        let (h, w) = (self.w2.rows(), self.w2.cols());
        let mut data = Vec::with_capacity(h * (w + 1));
        for r in 0..h {
            data.extend_from_slice(self.w2.row(r));
            data.push(0.0);
        }
        self.w2 = RealArray::new(vec![h, w + 1], data);
        let mut b = self.b2.data().to_vec();
        b.push(0.0);
        self.b2 = RealArray::new(vec![w + 1], b);
    }

    /// Discard the newest output column (a pruned task's column).
    pub fn drop_last_column(&mut self) {
        let (h, w) = (self.w2.rows(), self.w2.cols());
        assert!(w > 1, "cannot drop the auxiliary column");
        let mut data = Vec::with_capacity(h * (w - 1));
        for r in 0..h {
            data.extend_from_slice(&self.w2.row(r)[..w - 1]);
        }
        self.w2 = RealArray::new(vec![h, w - 1], data);
        let b = self.b2.data()[..w - 1].to_vec();
        self.b2 = RealArray::new(vec![w - 1], b);
    }
}

/// Graph handles for one gating network's parameters.
#[derive(Clone, Copy)]
pub struct GateVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GateVars {
    pub fn leaves(g: &mut Graph, net: &GatingNetwork) -> Self {
        Self {
            w1: g.leaf(net.w1.clone()),
            b1: g.leaf(net.b1.clone()),
            w2: g.leaf(net.w2.clone()),
            b2: g.leaf(net.b2.clone()),
        }
    }

    pub fn constants(g: &mut Graph, net: &GatingNetwork) -> Self {
        Self {
            w1: g.constant(net.w1.clone()),
            b1: g.constant(net.b1.clone()),
            w2: g.constant(net.w2.clone()),
            b2: g.constant(net.b2.clone()),
        }
    }
}

/// Raw gating scores for a context embedding: `net(mean_pool_rows(C))`,
/// shape `[1×width]`.
pub fn gate_scores_graph(g: &mut Graph, context: Var, vars: &GateVars) -> Var {
    let pooled = g.mean_rows(context);
    let h = g.matmul(pooled, vars.w1);
    let h = g.add_row_bias(h, vars.b1);
    let h = g.tanh(h);
    let out = g.matmul(h, vars.w2);
    g.add_row_bias(out, vars.b2)
}

/// Plain-value gating forward. Returns raw (unnormalized) scores.
pub fn gate_coefficients(context: &RealArray, net: &GatingNetwork) -> Result<RealArray> {
    if context.shape().len() != 2 || context.rows() == 0 {
        return Err(Error::Shape(format!("context must be L×d with L ≥ 1, got {:?}", context.shape())));
    }
    if context.cols() != net.w1.rows() {
        return Err(Error::Shape(format!(
            "context dim {} does not match gating input {}",
            context.cols(),
            net.w1.rows()
        )));
    }
    let mut g = Graph::new();
    let c = g.constant(context.clone());
    let vars = GateVars::constants(&mut g, net);
    let scores = gate_scores_graph(&mut g, c, &vars);
    let width = net.width();
    Ok(g.value(scores).reshaped(vec![width]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Train,
    Infer,
}

/// Chosen expert columns and their normalized coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionResult {
    pub indices: Vec<usize>,
    pub alphas: RealArray,
}

impl SelectionResult {
    pub fn alpha_of(&self, column: usize) -> Option<f64> {
        self.indices
            .iter()
            .position(|&i| i == column)
            .map(|p| self.alphas.data()[p])
    }
}

/// Expert selection and coefficient normalization.
///
/// Train mode forces expert 0 and the current expert in, then adds the
/// `k-1` highest-scoring prior experts. Infer mode forces expert 0 and adds
/// the `k-1` highest-scoring experts, never the in-training one. Ties break
/// toward the lower column. Coefficients are a softmax over the selected
/// scores, so they sum to one.
pub fn select_and_normalize(
    scores: &RealArray,
    current: Option<usize>,
    k: usize,
    mode: SelectionMode,
) -> Result<SelectionResult> {
    if k < 1 {
        return Err(Error::Domain("selection needs k ≥ 1".into()));
    }
    let width = scores.len();
    if width == 0 {
        return Err(Error::Domain("empty score vector".into()));
    }
    let pool_end = match mode {
        SelectionMode::Train => {
            let cur = current.ok_or_else(|| {
                Error::State("train-mode selection requires a current expert".into())
            })?;
            if cur == 0 || cur >= width {
                return Err(Error::State(format!("current column {cur} is not a trainable expert")));
            }
            cur
        }
        SelectionMode::Infer => width,
    };

    let mut pool: Vec<usize> = (1..pool_end)
        .filter(|&i| mode == SelectionMode::Train || current != Some(i))
        .collect();
    // stable sort: score descending, lower index wins ties
    pool.sort_by(|&a, &b| {
        scores.data()[b]
            .partial_cmp(&scores.data()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    pool.truncate(k - 1);

    let mut indices = vec![0usize];
    indices.extend_from_slice(&pool);
    if mode == SelectionMode::Train {
        indices.push(current.unwrap());
    }
    indices.sort_unstable();

    let selected: Vec<f64> = indices.iter().map(|&i| scores.data()[i]).collect();
    let alphas = crate::numerics::softmax(&RealArray::new(vec![selected.len()], selected))?;
    Ok(SelectionResult { indices, alphas })
}

/// Frozen base projection plus its expert registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoeProjection {
    pub base: RealArray,
    pub experts: ExpertRegistry,
}

impl MoeProjection {
    pub fn d_in(&self) -> usize {
        self.base.rows()
    }

    pub fn d_out(&self) -> usize {
        self.base.cols()
    }
}

/// Composed weight `W = W₀ + Σ αᵢ·Eᵢ` over the selected columns. Pruned
/// experts are structurally absent, so the unselected branch costs nothing;
/// alphas are used exactly as selected, with no renormalization.
pub fn compose_weight(proj: &MoeProjection, sel: &SelectionResult) -> Result<RealArray> {
    let mut g = Graph::new();
    let composed = compose_weight_graph(&mut g, proj, sel, None)?;
    Ok(g.value(composed).clone())
}

/// Graph handles for the one trainable expert during a task.
#[derive(Clone, Copy)]
pub struct ExpertVars {
    pub column: usize,
    pub down: Var,
    pub up: Var,
}

/// Graph form of `compose_weight`. When `trainable` names a selected column,
/// that expert's factors come from the supplied leaves so gradients reach
/// them; every other expert is a frozen constant.
pub fn compose_weight_graph(
    g: &mut Graph,
    proj: &MoeProjection,
    sel: &SelectionResult,
    trainable: Option<ExpertVars>,
) -> Result<Var> {
    let alphas = g.constant(sel.alphas.clone());
    compose_weight_graph_with(g, proj, &sel.indices, alphas, trainable)
}

/// Composition with alphas already living in the graph (training path).
pub fn compose_weight_graph_with(
    g: &mut Graph,
    proj: &MoeProjection,
    indices: &[usize],
    alphas: Var,
    trainable: Option<ExpertVars>,
) -> Result<Var> {
    let mut w = g.constant(proj.base.clone());
    for (pos, &col) in indices.iter().enumerate() {
        let dense = match trainable {
            Some(ev) if ev.column == col => g.matmul(ev.down, ev.up),
            _ => {
                let e = proj.experts.by_column(col)?;
                g.constant(e.dense())
            }
        };
        let scaled = g.scale_by_elem(dense, alphas, pos);
        w = g.add(w, scaled);
    }
    Ok(w)
}

/// Scaled dot-product attention `Softmax(QKᵀ/√dk)·V` with `Q = z·Wq`,
/// `K = C·Wk`, `V = C·Wv`. Returns the graph node of the output.
pub fn attention_graph(g: &mut Graph, z: Var, context: Var, wq: Var, wk: Var, wv: Var) -> Var {
    let q = g.matmul(z, wq);
    let k = g.matmul(context, wk);
    let v = g.matmul(context, wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let dk = g.value(wq).cols() as f64;
    let scaled = g.scale(scores, 1.0 / dk.sqrt());
    let probs = g.softmax_rows(scaled);
    g.matmul(probs, v)
}

/// Plain-value cross-attention with shape validation.
pub fn cross_attention(
    z: &RealArray,
    context: &RealArray,
    wq: &RealArray,
    wk: &RealArray,
    wv: &RealArray,
) -> Result<RealArray> {
    if z.shape().len() != 2 || context.shape().len() != 2 {
        return Err(Error::Shape("attention inputs must be 2-D".into()));
    }
    if z.cols() != wq.rows() {
        return Err(Error::Shape(format!("query dims {} vs {}", z.cols(), wq.rows())));
    }
    if context.cols() != wk.rows() || context.cols() != wv.rows() {
        return Err(Error::Shape(format!(
            "context dim {} does not match projections {}x{}",
            context.cols(),
            wk.rows(),
            wv.rows()
        )));
    }
    if wq.cols() != wk.cols() || wq.cols() == 0 {
        return Err(Error::Shape(format!("key dims {} vs {}", wq.cols(), wk.cols())));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let cv = g.constant(context.clone());
    let wqv = g.constant(wq.clone());
    let wkv = g.constant(wk.clone());
    let wvv = g.constant(wv.clone());
    let out = attention_graph(&mut g, zv, cv, wqv, wkv, wvv);
    Ok(g.value(out).clone())
}

/// One cross-attention layer: frozen query/output projections, K and V
/// expert registries, and the gating network they share.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoeAttnLayer {
    pub wq: RealArray,
    pub wo: RealArray,
    pub k_proj: MoeProjection,
    pub v_proj: MoeProjection,
    pub gate: GatingNetwork,
}

impl MoeAttnLayer {
    /// Extend both registries with task `n`'s expert and give the gate a
    /// zero column. Returns the new gating column.
    pub fn grow<R: Rng>(&mut self, task: usize, rank: usize, scale: f64, rng: &mut R) -> Result<usize> {
        let col = self.k_proj.experts.grow(
            task,
            self.k_proj.d_in(),
            self.k_proj.d_out(),
            rank,
            scale,
            rng,
        )?;
        let col_v = self.v_proj.experts.grow(
            task,
            self.v_proj.d_in(),
            self.v_proj.d_out(),
            rank,
            scale,
            rng,
        )?;
        debug_assert_eq!(col, col_v);
        self.gate.grow_column();
        debug_assert_eq!(self.gate.width(), self.k_proj.experts.width());
        Ok(col)
    }

    pub fn freeze_task(&mut self, task: usize) {
        self.k_proj.experts.freeze_task(task);
        self.v_proj.experts.freeze_task(task);
    }

    /// Remove task `n`'s expert from both registries and drop its column.
    pub fn prune_task(&mut self, task: usize) -> Result<()> {
        self.k_proj.experts.prune_task(task)?;
        self.v_proj.experts.prune_task(task)?;
        self.gate.drop_last_column();
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.gate.width()
    }
}
