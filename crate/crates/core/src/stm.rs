//! Short-term memory: cross-attention from the current frame's queries to the
//! previous frame's, with each query's attention suppressed over distance at
//! its own learned rate `τ`.

use crate::diff::{softmax_rows, softplus, Bound, ParamSet, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::geom::{pairwise_distances, Vec3};
use crate::model::names;

/// Refined queries of the previous frame with their centroids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StmMemory {
    pub queries: Tensor2,
    pub centroids: Vec<Vec3>,
}

impl StmMemory {
    pub fn new(queries: Tensor2, centroids: Vec<Vec3>) -> Result<Self> {
        if queries.rows() != centroids.len() {
            return Err(Error::Shape(format!(
                "{} memory queries with {} centroids",
                queries.rows(),
                centroids.len()
            )));
        }
        Ok(Self { queries, centroids })
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StmVars {
    pub refined: Var,
    /// `N_c x N_p` attention weights, absent when the memory is empty.
    pub attention: Option<Var>,
}

/// `softplus(q·w + b)`, one scale per query (`N x 1`).
pub fn tau_on_tape(tape: &mut Tape, bound: &Bound, q: Var) -> Var {
    let z = tape.linear(q, bound.get(names::STM_TAU_W), bound.get(names::STM_TAU_B));
    tape.softplus(z)
}

pub fn predict_tau(qc: &Tensor2, params: &ParamSet) -> Result<Vec<f64>> {
    let w = params.require(names::STM_TAU_W)?;
    let b = params.require(names::STM_TAU_B)?.item();
    if w.rows() != qc.cols() {
        return Err(Error::Shape(format!("tau head expects width {}, got {}", w.rows(), qc.cols())));
    }
    Ok((0..qc.rows())
        .map(|i| softplus(crate::diff::dot(qc.row(i), w.data()) + b))
        .collect())
}

/// Records one memory read. With an empty memory the queries pass through.
pub fn stm_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    qc: Var,
    xc: &[Vec3],
    memory: Option<(Var, &[Vec3])>,
) -> StmVars {
    let Some((qp, xp)) = memory.filter(|(_, xp)| !xp.is_empty()) else {
        return StmVars {
            refined: qc,
            attention: None,
        };
    };
    let d = tape.shape(qc).1;
    let k = tape.matmul(qp, bound.get(names::STM_KEY));
    let v = tape.matmul(qp, bound.get(names::STM_VALUE));
    let logits = tape.matmul_t(qc, k);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let dist = pairwise_distances(xc, xp);
    let dist = tape.leaf(Tensor2::from_vec(dist.rows(), dist.cols(), dist.values().to_vec()).unwrap());
    let tau = tau_on_tape(tape, bound, qc);
    let gate = tape.mul_col(dist, tau);
    let scores = tape.sub(logits, gate);
    let att = tape.softmax_rows(scores);
    let mix = tape.matmul(att, v);
    StmVars {
        refined: tape.add(qc, mix),
        attention: Some(att),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StmOutput {
    pub refined: Tensor2,
    pub attention: Option<Tensor2>,
}

pub fn stm_update(qc: &Tensor2, xc: &[Vec3], memory: &StmMemory, params: &ParamSet) -> Result<StmOutput> {
    if qc.rows() != xc.len() {
        return Err(Error::Shape(format!("{} queries with {} centroids", qc.rows(), xc.len())));
    }
    if !memory.is_empty() && memory.queries.cols() != qc.cols() {
        return Err(Error::Shape(format!(
            "memory width {} vs query width {}",
            memory.queries.cols(),
            qc.cols()
        )));
    }
    if qc.rows() == 0 {
        return Ok(StmOutput {
            refined: qc.clone(),
            attention: None,
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let q = tape.leaf(qc.clone());
    let mem = tape.leaf(memory.queries.clone());
    let out = stm_on_tape(&mut tape, &bound, q, xc, Some((mem, &memory.centroids)));
    Ok(StmOutput {
        refined: tape.value(out.refined).clone(),
        attention: out.attention.map(|a| tape.value(a).clone()),
    })
}

/// Plain cross-attention without distance gating, used as a reference.
pub fn ungated_attention(qc: &Tensor2, memory: &StmMemory, params: &ParamSet) -> Result<Tensor2> {
    let k = memory.queries.matmul(params.require(names::STM_KEY)?)?;
    let v = memory.queries.matmul(params.require(names::STM_VALUE)?)?;
    let s = qc.matmul_t(&k)?.map(|x| x / (qc.cols() as f64).sqrt());
    let mix = softmax_rows(&s)?.matmul(&v)?;
    Ok(qc.zip_map(&mix, |a, b| a + b))
}
