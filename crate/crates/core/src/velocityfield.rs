//! Conditional velocity network `v(z, t, c)` and its guided combination
//! `v_cfg = ω·v(z, t, c) + (1 − ω)·v(z, t, ∅)`.
//!
//! The network input is `[z ∥ time features(t) ∥ condition embedding]`. The
//! condition embedding is a row of the label table, the null vector `∅`, or an
//! explicitly supplied embedding (used when optimising per-step null vectors).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensornet::checkpoint::{meta_get, Metadata};
use crate::tensornet::{Activation, BoundMlp, Checkpoint, MlpNet, Tape, Tensor, Var};
use crate::toydata::ConditionEmbedding;

/// Training stage that produced a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Fm,
    Rf1,
    Rf2,
    Distilled,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Fm => "fm",
            Stage::Rf1 => "rf1",
            Stage::Rf2 => "rf2",
            Stage::Distilled => "distilled",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(Stage::Fm),
            "rf1" => Ok(Stage::Rf1),
            "rf2" => Ok(Stage::Rf2),
            "distilled" | "distill" => Ok(Stage::Distilled),
            other => Err(Error::format(format!("unknown stage tag `{other}`"))),
        }
    }
}

/// Conditioning input for one batch row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cond {
    Label(usize),
    Null,
}

/// Architecture of a [`VelocityField`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSpec {
    pub dim: usize,
    pub num_conditions: usize,
    pub embed_width: usize,
    pub time_embed_width: usize,
    pub hidden: Vec<usize>,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            num_conditions: 8,
            embed_width: 16,
            time_embed_width: 16,
            hidden: vec![128, 128, 128],
        }
    }
}

impl FieldSpec {
    pub fn input_width(&self) -> usize {
        self.dim + self.time_embed_width + self.embed_width
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend_from_slice(&self.hidden);
        w.push(self.dim);
        w
    }
}

/// Sinusoidal features of `t ∈ [0, 1]`: `sin(f_i t), cos(f_i t)` for
/// geometrically spaced frequencies `f_i ∈ [1, 32]`.
pub fn time_features(t: f64, width: usize, out: &mut Vec<f64>) {
    let half = width / 2;
    for i in 0..half {
        let f = if half > 1 {
            (i as f64 * 32f64.ln() / (half - 1) as f64).exp()
        } else {
            1.0
        };
        out.push((f * t).sin());
        out.push((f * t).cos());
    }
    if width % 2 == 1 {
        out.push(t);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub net: MlpNet,
    pub cond: ConditionEmbedding,
    pub spec: FieldSpec,
    pub stage: Stage,
    /// Free-form variant tags (e.g. ablations), stored in checkpoint metadata.
    pub tags: Vec<String>,
}

/// Tape handles for every trainable tensor of a field.
pub struct BoundField {
    pub net: BoundMlp,
    pub table: Var,
    pub null: Var,
}

impl BoundField {
    /// Handles in the same order as [`VelocityField::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.net.vars().collect();
        v.push(self.table);
        v.push(self.null);
        v
    }
}

/// Source of the condition-embedding rows for a batch.
pub enum EmbeddingInput<'a> {
    Conds(&'a [Cond]),
    /// Explicit rows, `[n, E]`, or `[1, E]` broadcast to every row.
    Rows(&'a Tensor),
}

impl VelocityField {
    pub fn new<R: Rng + ?Sized>(spec: FieldSpec, stage: Stage, rng: &mut R) -> Result<Self> {
        let net = MlpNet::new(&spec.widths(), Activation::Silu, rng)?;
        let cond = ConditionEmbedding::new(spec.num_conditions, spec.embed_width, rng)?;
        Ok(Self {
            net,
            cond,
            spec,
            stage,
            tags: Vec::new(),
        })
    }

    /// Builds a field around explicit parts, validating widths.
    pub fn from_parts(net: MlpNet, cond: ConditionEmbedding, spec: FieldSpec, stage: Stage) -> Result<Self> {
        if net.widths().first() != Some(&spec.input_width()) || net.output_width() != spec.dim {
            return Err(Error::dim(format!(
                "network widths {:?} do not fit dim {} + time {} + embed {}",
                net.widths(),
                spec.dim,
                spec.time_embed_width,
                spec.embed_width
            )));
        }
        if cond.num_conditions() != spec.num_conditions || cond.width() != spec.embed_width {
            return Err(Error::dim("embedding table does not match spec"));
        }
        Ok(Self {
            net,
            cond,
            spec,
            stage,
            tags: Vec::new(),
        })
    }

    /// A field whose output is the constant `velocity` everywhere.
    pub fn constant(spec: FieldSpec, velocity: &[f64]) -> Result<Self> {
        if velocity.len() != spec.dim {
            return Err(Error::dim("constant velocity length != dim"));
        }
        let mut net = MlpNet::zeros(&spec.widths(), Activation::Silu)?;
        let last = net.layers_mut().last_mut().unwrap();
        last.bias.data_mut().copy_from_slice(velocity);
        let cond = ConditionEmbedding::zeros(spec.num_conditions, spec.embed_width);
        Self::from_parts(net, cond, spec, Stage::Fm)
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn embed_width(&self) -> usize {
        self.spec.embed_width
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.tags.iter().any(|t| t == tag)
    }

    fn check_z(&self, z: &Tensor) -> Result<()> {
        if z.shape().len() != 2 || z.cols() != self.spec.dim {
            return Err(Error::dim(format!(
                "state shape {:?}, expected [n, {}]",
                z.shape(),
                self.spec.dim
            )));
        }
        Ok(())
    }

    fn time_matrix(&self, n: usize, ts: &[f64]) -> Result<Tensor> {
        if ts.len() != 1 && ts.len() != n {
            return Err(Error::dim(format!("{} times for {n} rows", ts.len())));
        }
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let w = self.spec.time_embed_width;
        let mut data = Vec::with_capacity(n * w);
        if ts.len() == 1 {
            let mut row = Vec::with_capacity(w);
            time_features(ts[0], w, &mut row);
            for _ in 0..n {
                data.extend_from_slice(&row);
            }
        } else {
            for &t in ts {
                time_features(t, w, &mut data);
            }
        }
        Ok(Tensor::from_parts(vec![n, w], data))
    }

    fn embedding_rows(&self, n: usize, emb: &EmbeddingInput<'_>) -> Result<Tensor> {
        let e = self.spec.embed_width;
        match emb {
            EmbeddingInput::Conds(conds) => {
                if conds.len() != n {
                    return Err(Error::dim(format!("{} conditions for {n} rows", conds.len())));
                }
                let mut data = Vec::with_capacity(n * e);
                for c in conds.iter() {
                    match *c {
                        Cond::Label(l) => {
                            if l >= self.spec.num_conditions {
                                return Err(Error::Domain(format!(
                                    "label {l} outside [0, {})",
                                    self.spec.num_conditions
                                )));
                            }
                            data.extend_from_slice(self.cond.table.row(l));
                        }
                        Cond::Null => data.extend_from_slice(self.cond.null.data()),
                    }
                }
                Ok(Tensor::from_parts(vec![n, e], data))
            }
            EmbeddingInput::Rows(rows) => {
                if rows.cols() != e || (rows.rows() != 1 && rows.rows() != n) {
                    return Err(Error::dim(format!(
                        "embedding rows {:?} for batch of {n} with width {e}",
                        rows.shape()
                    )));
                }
                if rows.rows() == n {
                    return Ok((*rows).clone().reshape(vec![n, e])?);
                }
                let mut data = Vec::with_capacity(n * e);
                for _ in 0..n {
                    data.extend_from_slice(rows.data());
                }
                Ok(Tensor::from_parts(vec![n, e], data))
            }
        }
    }

    fn input_matrix(&self, z: &Tensor, ts: &[f64], emb: &Tensor) -> Tensor {
        let n = z.rows();
        let tm = self.time_matrix(n, ts).expect("validated by caller");
        let width = self.spec.input_width();
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend_from_slice(z.row(i));
            data.extend_from_slice(tm.row(i));
            data.extend_from_slice(emb.row(i));
        }
        Tensor::from_parts(vec![n, width], data)
    }

    /// Evaluates the field for a batch `z: [n, dim]` at one shared time or
    /// per-row times.
    pub fn eval(&self, z: &Tensor, ts: &[f64], emb: EmbeddingInput<'_>) -> Result<Tensor> {
        self.check_z(z)?;
        let n = z.rows();
        self.time_matrix(n, ts)?;
        let rows = self.embedding_rows(n, &emb)?;
        let x = self.input_matrix(z, ts, &rows);
        self.net.forward(&x)
    }

    /// `v(z, t, c)` for a batch with one condition (label or null) per row.
    pub fn eval_velocity(&self, z: &Tensor, t: f64, conds: &[Cond]) -> Result<Tensor> {
        self.eval(z, &[t], EmbeddingInput::Conds(conds))
    }

    /// Conditional velocity for plain labels.
    pub fn eval_labels(&self, z: &Tensor, t: f64, labels: &[usize]) -> Result<Tensor> {
        let conds: Vec<Cond> = labels.iter().map(|&l| Cond::Label(l)).collect();
        self.eval_velocity(z, t, &conds)
    }

    /// Places all trainable tensors on the tape.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundField {
        let net = self.net.bind(tape, trainable);
        let mut table = self.cond.table.clone();
        let mut null = self.cond.null.clone();
        table.set_requires_grad(trainable);
        null.set_requires_grad(trainable);
        BoundField {
            net,
            table: tape.leaf(table),
            null: tape.leaf(null),
        }
    }

    /// Recorded forward pass with embeddings gathered from the bound tables.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundField,
        z: &Tensor,
        ts: &[f64],
        conds: &[Cond],
    ) -> Result<Var> {
        self.check_z(z)?;
        let n = z.rows();
        if conds.len() != n {
            return Err(Error::dim(format!("{} conditions for {n} rows", conds.len())));
        }
        let k = self.spec.num_conditions;
        let idx = conds
            .iter()
            .map(|c| match *c {
                Cond::Label(l) if l < k => Ok(l),
                Cond::Label(l) => Err(Error::Domain(format!("label {l} outside [0, {k})"))),
                Cond::Null => Ok(k),
            })
            .collect::<Result<Vec<_>>>()?;
        let all = tape.concat_rows(&[bound.table, bound.null])?;
        let emb = tape.gather_rows(all, &idx)?;
        self.forward_tape_with(tape, &bound.net, z, ts, emb)
    }

    /// Recorded forward pass with an explicit `[n, E]` embedding node.
    pub fn forward_tape_with(
        &self,
        tape: &mut Tape,
        net: &BoundMlp,
        z: &Tensor,
        ts: &[f64],
        emb: Var,
    ) -> Result<Var> {
        self.check_z(z)?;
        let n = z.rows();
        let tm = self.time_matrix(n, ts)?;
        if tape.value(emb).rows() != n || tape.value(emb).cols() != self.spec.embed_width {
            return Err(Error::dim("embedding node does not match batch"));
        }
        let zv = tape.constant(z.clone());
        let tv = tape.constant(tm);
        let x = tape.concat_cols(&[zv, tv, emb])?;
        self.net.forward_tape(tape, net, x)
    }

    /// Parameters in a fixed order: network layers, label table, null vector.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.net.parameters();
        p.push(&self.cond.table);
        p.push(&self.cond.null);
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.net.parameters_mut();
        p.push(&mut self.cond.table);
        p.push(&mut self.cond.null);
        p
    }

    /// Entries of `extra_meta` whose keys the field writes itself are ignored,
    /// so re-saving a loaded checkpoint with its own metadata is a no-op.
    pub fn to_checkpoint(&self, extra_meta: &Metadata) -> Checkpoint {
        let mut metadata: Metadata = vec![
            ("kind".into(), "velocity_field".into()),
            ("stage".into(), self.stage.to_string()),
            ("dim".into(), self.spec.dim.to_string()),
            ("num_conditions".into(), self.spec.num_conditions.to_string()),
            ("embed_width".into(), self.spec.embed_width.to_string()),
            ("time_embed_width".into(), self.spec.time_embed_width.to_string()),
            ("tags".into(), self.tags.join(",")),
        ];
        let own: Vec<String> = metadata.iter().map(|(k, _)| k.clone()).collect();
        metadata.extend(extra_meta.iter().filter(|(k, _)| !own.contains(k)).cloned());
        Checkpoint {
            metadata,
            net: self.net.clone(),
            extras: vec![self.cond.table.clone(), self.cond.null.clone()],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            meta_get(&ck.metadata, k).ok_or_else(|| Error::format(format!("checkpoint metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("bad integer for `{k}`")))
        };
        if get("kind")? != "velocity_field" {
            return Err(Error::format("checkpoint does not hold a velocity field"));
        }
        let stage: Stage = get("stage")?.parse()?;
        let net = ck.net.clone();
        let mut hidden = net.widths().to_vec();
        hidden.remove(0);
        hidden.pop();
        let spec = FieldSpec {
            dim: num("dim")?,
            num_conditions: num("num_conditions")?,
            embed_width: num("embed_width")?,
            time_embed_width: num("time_embed_width")?,
            hidden,
        };
        let [table, null] = <[Tensor; 2]>::try_from(ck.extras.clone())
            .map_err(|_| Error::format("expected two embedding blocks"))?;
        let mut field = Self::from_parts(net, ConditionEmbedding { table, null }, spec, stage)?;
        field.tags = get("tags")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        Ok(field)
    }

    pub fn save(&self, path: &Path, extra_meta: &Metadata) -> Result<()> {
        std::fs::write(path, self.to_checkpoint(extra_meta).to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Metadata)> {
        let ck = Checkpoint::from_bytes(&std::fs::read(path)?)?;
        Ok((Self::from_checkpoint(&ck)?, ck.metadata))
    }
}

/// Guidance scale plus optional per-step null embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub omega: f64,
    /// One `[n, E]` (or `[1, E]`) tensor per solver step.
    pub step_embeddings: Option<Vec<Tensor>>,
}

impl GuidanceSpec {
    pub fn new(omega: f64) -> Result<Self> {
        if !(omega >= 0.0 && omega.is_finite()) {
            return Err(Error::param(format!("guidance scale must be >= 0, got {omega}")));
        }
        Ok(Self {
            omega,
            step_embeddings: None,
        })
    }

    pub fn with_step_embeddings(mut self, embeddings: Vec<Tensor>) -> Self {
        self.step_embeddings = Some(embeddings);
        self
    }
}

/// `ω·v(z, t, c) + (1 − ω)·v(z, t, ∅)`. At `ω = 1` the conditional velocity
/// is returned untouched.
pub fn eval_cfg(
    field: &VelocityField,
    spec: &GuidanceSpec,
    z: &Tensor,
    t: f64,
    labels: &[usize],
    step_index: usize,
) -> Result<Tensor> {
    let null_rows = match &spec.step_embeddings {
        Some(list) => Some(list.get(step_index).ok_or_else(|| {
            Error::contract(format!(
                "no null embedding for step {step_index} ({} provided)",
                list.len()
            ))
        })?),
        None => None,
    };
    let cond = field.eval_labels(z, t, labels)?;
    if spec.omega == 1.0 {
        return Ok(cond);
    }
    let uncond = match null_rows {
        Some(rows) => field.eval(z, &[t], EmbeddingInput::Rows(rows))?,
        None => field.eval_velocity(z, t, &vec![Cond::Null; z.rows()])?,
    };
    Ok(combine_cfg(spec.omega, &cond, &uncond))
}

pub(crate) fn combine_cfg(omega: f64, cond: &Tensor, uncond: &Tensor) -> Tensor {
    let data = cond
        .data()
        .iter()
        .zip(uncond.data())
        .map(|(c, u)| omega * c + (1.0 - omega) * u)
        .collect();
    Tensor::from_parts(cond.shape().to_vec(), data)
}
