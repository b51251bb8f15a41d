//! Minibatch assignment of noise to data, and generated `(z₀, z₁, label)`
//! coupling sets used as reflow and distillation targets.
//!
//! Coupling file layout (all integers little-endian):
//!
//! ```text
//! "RFCPL" | version u32 | dim u32 | count u64 | num_conditions u32
//! | metadata length u32 | metadata (UTF-8 "key=value\n" lines)
//! | count × (z0: dim × f64 | z1: dim × f64 | label u32)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchored::{anchored_generate, AnchoredConfig};
use crate::error::{Error, Result};
use crate::solver::{euler_final, Guided};
use crate::tensornet::checkpoint::{
    decode_metadata, encode_metadata, meta_get, put_f64s, put_u32, put_u64, to_u32, Metadata, Reader,
};
use crate::tensornet::Tensor;
use crate::toydata::sample_noise;
use crate::util::{map_ordered, sha256_hex};
use crate::velocityfield::{GuidanceSpec, VelocityField};

const MAGIC: &[u8; 5] = b"RFCPL";
const VERSION: u32 = 1;

/// `cost[i][j] = ‖z1ᵢ − z0ⱼ‖²`, returned as an `[n, n]` tensor.
pub fn pairwise_cost(z1: &Tensor, z0: &Tensor) -> Result<Tensor> {
    if z1.shape().len() != 2 || z1.shape() != z0.shape() {
        return Err(Error::dim(format!("cost between {:?} and {:?}", z1.shape(), z0.shape())));
    }
    let n = z1.rows();
    let mut data = Vec::with_capacity(n * n);
    for i in 0..n {
        let a = z1.row(i);
        for j in 0..n {
            data.push(a.iter().zip(z0.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    Ok(Tensor::from_parts(vec![n, n], data))
}

/// Row `i` of the data batch is paired with row `perm[i]` of the noise batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    /// `Σᵢ cost[i][perm[i]]`, summed in row order.
    pub cost: f64,
}

/// Exact minimum-cost perfect matching on a square cost matrix
/// (shortest augmenting paths with row/column potentials, O(n³)).
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let n = cost.rows();
    if cost.shape().len() != 2 || cost.cols() != n {
        return Err(Error::dim(format!("cost matrix {:?} is not square", cost.shape())));
    }
    if cost.data().iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("cost matrix has non-finite entries".into()));
    }
    let data = cost.data();
    // 1-based indices; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    // Feasible starting duals and a greedy matching on tight edges; only the
    // rows left unmatched need augmenting paths.
    for i in 1..=n {
        u[i] = data[(i - 1) * n..i * n].iter().copied().fold(f64::INFINITY, f64::min);
    }
    for j in 1..=n {
        v[j] = (1..=n).map(|i| data[(i - 1) * n + j - 1] - u[i]).fold(f64::INFINITY, f64::min);
    }
    let mut free_rows = Vec::new();
    for i in 1..=n {
        let row = &data[(i - 1) * n..i * n];
        match (1..=n).find(|&j| p[j] == 0 && row[j - 1] - u[i] - v[j] == 0.0) {
            Some(j) => p[j] = i,
            None => free_rows.push(i),
        }
    }
    for i in free_rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &data[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            let cols = row
                .iter()
                .zip(&v[1..])
                .zip(&mut minv[1..])
                .zip(&mut way[1..])
                .zip(&used[1..]);
            for (j, ((((&c, &vj), mj), wj), &uj)) in cols.enumerate() {
                if !uj {
                    let cur = c - ui0 - vj;
                    if cur < *mj {
                        *mj = cur;
                        *wj = j0;
                    }
                    if *mj < delta {
                        delta = *mj;
                        j1 = j + 1;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| data[i * n + perm[i]]).sum();
    Ok(Assignment { perm, cost: total })
}

/// Pairs every data row with a distinct noise row so the total squared
/// distance is minimal.
pub fn immiscible_assign(z1: &Tensor, z0: &Tensor) -> Result<Assignment> {
    hungarian(&pairwise_cost(z1, z0)?)
}

/// `(1 − t)·z0 + t·z1` with one shared `t`.
pub fn interpolate(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    interpolate_rows(z0, z1, &vec![t; z0.rows()])
}

/// `(1 − tᵢ)·z0ᵢ + tᵢ·z1ᵢ` with a time per row.
pub fn interpolate_rows(z0: &Tensor, z1: &Tensor, ts: &[f64]) -> Result<Tensor> {
    if z0.shape() != z1.shape() || ts.len() != z0.rows() {
        return Err(Error::dim(format!(
            "interpolate {:?} with {:?} at {} times",
            z0.shape(),
            z1.shape(),
            ts.len()
        )));
    }
    let cols = z0.cols();
    let data = z0
        .data()
        .iter()
        .zip(z1.data())
        .enumerate()
        .map(|(k, (a, b))| {
            let t = ts[k / cols];
            (1.0 - t) * a + t * b
        })
        .collect();
    Ok(Tensor::from_parts(z0.shape().to_vec(), data))
}

/// Stored `(z₀, z₁, label)` records plus the metadata that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingSet {
    pub dim: usize,
    pub num_conditions: usize,
    /// `[count, dim]`
    pub z0: Tensor,
    /// `[count, dim]`
    pub z1: Tensor,
    pub labels: Vec<usize>,
    pub metadata: Metadata,
}

impl CouplingSet {
    pub fn new(z0: Tensor, z1: Tensor, labels: Vec<usize>, num_conditions: usize, metadata: Metadata) -> Result<Self> {
        if z0.shape().len() != 2 || z0.shape() != z1.shape() || labels.len() != z0.rows() {
            return Err(Error::dim("coupling endpoints and labels disagree"));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_conditions) {
            return Err(Error::Domain(format!("label {l} outside [0, {num_conditions})")));
        }
        Ok(Self {
            dim: z0.cols(),
            num_conditions,
            z0,
            z1,
            labels,
            metadata,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        meta_get(&self.metadata, key)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = encode_metadata(&self.metadata)?;
        let mut out = Vec::with_capacity(32 + meta.len() + self.len() * (16 * self.dim + 4));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, to_u32(self.dim, "dim")?);
        put_u64(&mut out, self.len() as u64);
        put_u32(&mut out, to_u32(self.num_conditions, "condition count")?);
        put_u32(&mut out, to_u32(meta.len(), "metadata length")?);
        out.extend_from_slice(&meta);
        for i in 0..self.len() {
            put_f64s(&mut out, self.z0.row(i));
            put_f64s(&mut out, self.z1.row(i));
            put_u32(&mut out, self.labels[i] as u32);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(MAGIC.len())? != MAGIC {
            return Err(Error::format("not a coupling file (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported coupling version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = usize::try_from(r.u64()?).map_err(|_| Error::format("record count overflows"))?;
        let num_conditions = r.u32()? as usize;
        let meta_len = r.u32()? as usize;
        let metadata = decode_metadata(r.bytes(meta_len)?)?;
        let record = dim
            .checked_mul(16)
            .and_then(|b| b.checked_add(4))
            .ok_or_else(|| Error::format("record size overflows"))?;
        if count.checked_mul(record).is_none_or(|b| b > bytes.len()) {
            return Err(Error::format("record count exceeds file size"));
        }
        let mut z0 = Vec::with_capacity(count * dim);
        let mut z1 = Vec::with_capacity(count * dim);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            z0.extend(r.f64s(dim)?);
            z1.extend(r.f64s(dim)?);
            labels.push(r.u32()? as usize);
        }
        r.finish()?;
        Self::new(
            Tensor::new(vec![count, dim], z0)?,
            Tensor::new(vec![count, dim], z1)?,
            labels,
            num_conditions,
            metadata,
        )
        .map_err(|e| Error::format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Everything (besides the model itself) that determines a generated set.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingRequest {
    pub task: String,
    pub count: usize,
    pub steps: usize,
    pub omega: f64,
    pub anchored: bool,
    pub anchor: AnchoredConfig,
    pub seed: u64,
    /// Records per independently seeded shard.
    pub shard_size: usize,
}

impl CouplingRequest {
    pub fn new(task: &str, count: usize, seed: u64) -> Self {
        Self {
            task: task.to_string(),
            count,
            steps: 100,
            omega: 1.0,
            anchored: false,
            anchor: AnchoredConfig::default(),
            seed,
            shard_size: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("coupling generation needs at least one solver step"));
        }
        if self.shard_size == 0 {
            return Err(Error::param("shard size must be >= 1"));
        }
        GuidanceSpec::new(self.omega)?;
        if self.anchored && self.omega < 1.0 {
            return Err(Error::param("anchored generation needs omega >= 1"));
        }
        self.anchor.validate()
    }

    pub fn to_metadata(&self, model_id: &str) -> Metadata {
        let eps = self.anchor.eps.map_or_else(|| "default".to_string(), |e| e.to_string());
        vec![
            ("kind".into(), "couplings".into()),
            ("model_id".into(), model_id.into()),
            ("task".into(), self.task.clone()),
            ("count".into(), self.count.to_string()),
            ("steps".into(), self.steps.to_string()),
            ("omega".into(), self.omega.to_string()),
            ("anchored".into(), self.anchored.to_string()),
            ("inner_iters".into(), self.anchor.inner_iters.to_string()),
            ("eps".into(), eps),
            ("lr_embed".into(), self.anchor.lr_embed.to_string()),
            ("line_search".into(), self.anchor.line_search.to_string()),
            ("max_step".into(), self.anchor.max_step.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("shard_size".into(), self.shard_size.to_string()),
        ]
    }

    pub fn from_metadata(meta: &Metadata) -> Result<Self> {
        let get = |k: &str| meta_get(meta, k).ok_or_else(|| Error::format(format!("coupling metadata lacks `{k}`")));
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::format(format!("bad value `{v}` for `{k}`")))
        }
        let eps = match get("eps")? {
            "default" => None,
            v => Some(parse("eps", v)?),
        };
        Ok(Self {
            task: get("task")?.to_string(),
            count: parse("count", get("count")?)?,
            steps: parse("steps", get("steps")?)?,
            omega: parse("omega", get("omega")?)?,
            anchored: parse("anchored", get("anchored")?)?,
            anchor: AnchoredConfig {
                inner_iters: parse("inner_iters", get("inner_iters")?)?,
                eps,
                lr_embed: parse("lr_embed", get("lr_embed")?)?,
                line_search: parse("line_search", get("line_search")?)?,
                max_step: parse("max_step", get("max_step")?)?,
            },
            seed: parse("seed", get("seed")?)?,
            shard_size: parse("shard_size", get("shard_size")?)?,
        })
    }
}

/// Content hash of a field's parameters and shape metadata.
pub fn model_id(field: &VelocityField) -> Result<String> {
    Ok(sha256_hex(&field.to_checkpoint(&Vec::new()).to_bytes()?))
}

/// Seeded RNG for shard `index`: one ChaCha stream per shard.
pub(crate) fn shard_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Shard {
    z0: Tensor,
    z1: Tensor,
    labels: Vec<usize>,
}

fn generate_shard(field: &VelocityField, req: &CouplingRequest, index: usize) -> Result<Shard> {
    let start = index * req.shard_size;
    let n = req.shard_size.min(req.count - start);
    let mut rng = shard_rng(req.seed, index);
    let k = field.spec.num_conditions;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let z0 = sample_noise(&mut rng, n, field.spec.dim);
    let z1 = if req.anchored {
        anchored_generate(field, &z0, &labels, req.steps, req.omega, &req.anchor).map(|r| r.final_state)
    } else {
        let spec = GuidanceSpec::new(req.omega)?;
        euler_final(&Guided { field, spec: &spec }, &z0, &labels, req.steps)
    };
    let z1 = z1.map_err(|e| {
        let row = match e {
            Error::Divergence { row, .. } | Error::AnchoredResidual { row, .. } => row,
            _ => 0,
        };
        Error::Generation {
            record: start + row,
            source: Box::new(e),
        }
    })?;
    Ok(Shard { z0, z1, labels })
}

/// Simulates `req.count` noise draws through the (optionally guided and
/// anchored) field. Shards are generated in parallel and concatenated by
/// shard index, so the result does not depend on the worker count.
pub fn generate_couplings(field: &VelocityField, req: &CouplingRequest) -> Result<CouplingSet> {
    req.validate()?;
    let shards = req.count.div_ceil(req.shard_size);
    let parts = map_ordered(shards, |i| generate_shard(field, req, i));
    let dim = field.spec.dim;
    let mut z0 = Vec::with_capacity(req.count * dim);
    let mut z1 = Vec::with_capacity(req.count * dim);
    let mut labels = Vec::with_capacity(req.count);
    for part in parts {
        let part = part?;
        z0.extend_from_slice(part.z0.data());
        z1.extend_from_slice(part.z1.data());
        labels.extend(part.labels);
    }
    CouplingSet::new(
        Tensor::from_parts(vec![req.count, dim], z0),
        Tensor::from_parts(vec![req.count, dim], z1),
        labels,
        field.spec.num_conditions,
        req.to_metadata(&model_id(field)?),
    )
}

/// Re-runs the generation recorded in `set.metadata` with `field`.
pub fn regenerate(field: &VelocityField, set: &CouplingSet) -> Result<CouplingSet> {
    let req = CouplingRequest::from_metadata(&set.metadata)?;
    if set.meta("model_id") != Some(model_id(field)?.as_str()) {
        return Err(Error::contract("field does not match the coupling set's model id"));
    }
    generate_couplings(field, &req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocityfield::FieldSpec;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cost_examples() {
        assert_eq!(pairwise_cost(&t(&[&[0.0]]), &t(&[&[3.0]])).unwrap().data(), &[9.0]);
        let a = t(&[&[1.0, 2.0], &[-1.0, 0.5]]);
        let c = pairwise_cost(&a, &a).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert_eq!(c.data()[3], 0.0);
        assert!(pairwise_cost(&a, &t(&[&[1.0, 2.0]])).is_err());
    }

    #[test]
    fn swap_example() {
        let z1 = t(&[&[0.0], &[10.0]]);
        let z0 = t(&[&[9.0], &[1.0]]);
        let a = immiscible_assign(&z1, &z0).unwrap();
        assert_eq!(a.perm, vec![1, 0]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn self_assignment_is_identity() {
        let z = t(&[&[0.3, 1.0], &[-2.0, 0.0], &[5.0, 5.0]]);
        let a = immiscible_assign(&z, &z).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn empty_and_non_finite() {
        let a = hungarian(&Tensor::zeros(&[0, 0])).unwrap();
        assert!(a.perm.is_empty());
        let bad = Tensor::from_parts(vec![1, 1], vec![f64::NAN]);
        assert!(hungarian(&bad).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let z0 = t(&[&[0.0, 0.0]]);
        let z1 = t(&[&[2.0, 4.0]]);
        assert_eq!(interpolate(&z0, &z1, 0.25).unwrap().data(), &[0.5, 1.0]);
        assert_eq!(interpolate(&z0, &z1, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &z1, 1.0).unwrap(), z1);
    }

    fn small_field() -> VelocityField {
        let spec = FieldSpec {
            dim: 2,
            num_conditions: 3,
            embed_width: 4,
            time_embed_width: 4,
            hidden: vec![8],
        };
        VelocityField::constant(spec, &[1.0, 0.0]).unwrap()
    }

    #[test]
    fn constant_field_couplings() {
        let mut req = CouplingRequest::new("gauss8", 10, 3);
        req.steps = 7;
        req.shard_size = 4;
        let set = generate_couplings(&small_field(), &req).unwrap();
        assert_eq!(set.len(), 10);
        for i in 0..10 {
            assert!((set.z1.row(i)[0] - set.z0.row(i)[0] - 1.0).abs() < 1e-12);
            assert!((set.z1.row(i)[1] - set.z0.row(i)[1]).abs() < 1e-12);
            assert!(set.labels[i] < 3);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let req = CouplingRequest::new("gauss8", 5, 1);
        let set = generate_couplings(&small_field(), &req).unwrap();
        let bytes = set.to_bytes().unwrap();
        let back = CouplingSet::from_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(CouplingSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CouplingSet::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(CouplingSet::from_bytes(&bad).is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let mut req = CouplingRequest::new("moons2", 17, 9);
        req.omega = 2.5;
        req.anchored = true;
        req.anchor.eps = Some(1e-7);
        let back = CouplingRequest::from_metadata(&req.to_metadata("abc")).unwrap();
        assert_eq!(back, req);
    }
}
