use serde::{Deserialize, Serialize};

use crate::diff::{mlp_forward, mlp_on_tape, Activation, Bound, MlpParams, ParamSet, Tape, Tensor2, Var};
use crate::error::{Error, Result};
use crate::geom::Aabb;
use crate::model::AffinityNames;
use crate::percept::boxes_to_tensor;

/// Added to excluded logits so their softmax weight is exactly zero.
const EXCLUDED_LOGIT: f64 = -1e9;

/// Row-normalised match probabilities `m`, confidence gate `c` and their
/// product `a`, each `N_t x N_trk`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedAffinity {
    pub m: Tensor2,
    pub c: Tensor2,
    pub a: Tensor2,
}

impl GatedAffinity {
    pub fn empty(rows: usize) -> Self {
        Self {
            m: Tensor2::zeros(rows, 0),
            c: Tensor2::zeros(rows, 0),
            a: Tensor2::zeros(rows, 0),
        }
    }
}

/// Affinity results recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AffinityVars {
    /// Pre-softmax match logits.
    pub logits: Var,
    pub log_m: Var,
    pub m: Var,
    /// Pre-sigmoid gate logits.
    pub gate_logits: Var,
    pub c: Var,
    pub a: Var,
}

/// Pair features `(N_t·N_trk) x d`, row `i·N_trk + j`: the elementwise product
/// of the two embeddings plus an MLP embedding of their box IoU.
pub fn affinity_features_on_tape(
    tape: &mut Tape,
    geo: &[(Var, Var)],
    qt: Var,
    qtrk: Var,
    bt: Var,
    btrk: Var,
) -> Var {
    let (n_t, n_trk) = (tape.shape(qt).0, tape.shape(qtrk).0);
    let rows: Vec<usize> = (0..n_t).flat_map(|i| std::iter::repeat_n(i, n_trk)).collect();
    let cols: Vec<usize> = (0..n_t).flat_map(|_| 0..n_trk).collect();
    let a = tape.gather_rows(qt, rows);
    let b = tape.gather_rows(qtrk, cols);
    let app = tape.mul(a, b);
    let iou = tape.box_iou(bt, btrk);
    let g = mlp_on_tape(tape, geo, Activation::Relu, iou);
    tape.add(app, g)
}

/// Match and gate scores from pair features. With `exclude_diagonal` (square
/// self-affinity) a row never matches itself.
pub fn gated_affinity_on_tape(
    tape: &mut Tape,
    e: Var,
    w: Var,
    w_gate: Var,
    n_t: usize,
    n_trk: usize,
    exclude_diagonal: bool,
) -> AffinityVars {
    let z = tape.matmul(e, w);
    let mut logits = tape.reshape(z, n_t, n_trk);
    if exclude_diagonal {
        let mut mask = Tensor2::zeros(n_t, n_trk);
        for i in 0..n_t.min(n_trk) {
            mask.set(i, i, EXCLUDED_LOGIT);
        }
        let mask = tape.leaf(mask);
        logits = tape.add(logits, mask);
    }
    let m = tape.softmax_rows(logits);
    let log_m = tape.log_softmax_rows(logits);
    let g = tape.matmul(e, w_gate);
    let gate_logits = tape.reshape(g, n_t, n_trk);
    let c = tape.sigmoid(gate_logits);
    let a = tape.mul(m, c);
    AffinityVars {
        logits,
        log_m,
        m,
        gate_logits,
        c,
        a,
    }
}

/// Whole affinity head under `names`, recorded on a tape.
pub fn affinity_on_tape(
    tape: &mut Tape,
    bound: &Bound,
    names: &AffinityNames,
    qt: Var,
    bt: Var,
    qtrk: Var,
    btrk: Var,
    exclude_diagonal: bool,
) -> AffinityVars {
    let geo = bound.mlp(&names.geo);
    let e = affinity_features_on_tape(tape, &geo, qt, qtrk, bt, btrk);
    let (n_t, n_trk) = (tape.shape(qt).0, tape.shape(qtrk).0);
    gated_affinity_on_tape(tape, e, bound.get(&names.w), bound.get(&names.w_gate), n_t, n_trk, exclude_diagonal)
}

pub fn affinity_features(
    qt: &Tensor2,
    qtrk: &Tensor2,
    bt: &[Aabb],
    btrk: &[Aabb],
    geo: &MlpParams,
) -> Result<Tensor2> {
    if qt.cols() != qtrk.cols() {
        return Err(Error::Shape(format!("embedding widths {} and {}", qt.cols(), qtrk.cols())));
    }
    if bt.len() != qt.rows() || btrk.len() != qtrk.rows() {
        return Err(Error::Shape("one box per embedding required".into()));
    }
    if geo.input_dim() != 1 || geo.output_dim() != qt.cols() {
        return Err(Error::Shape(format!(
            "geometric MLP maps {} -> {}, expected 1 -> {}",
            geo.input_dim(),
            geo.output_dim(),
            qt.cols()
        )));
    }
    if qt.rows() == 0 || qtrk.rows() == 0 {
        return Ok(Tensor2::zeros(0, qt.cols()));
    }
    let mut tape = Tape::new();
    let (ba, bb) = (tape.leaf(boxes_to_tensor(bt)), tape.leaf(boxes_to_tensor(btrk)));
    let iou = tape.box_iou(ba, bb);
    let iou = tape.value(iou).data();
    // Most pairs do not overlap at all, so the geometric MLP only sees the
    // distinct IoU values. Rows are independent, so the result is the same.
    let mut distinct = iou.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let g = mlp_forward(geo, &Tensor2::from_vec(distinct.len(), 1, distinct.clone())?)?;
    let d = qt.cols();
    let mut out = Vec::with_capacity(iou.len() * d);
    for i in 0..qt.rows() {
        for j in 0..qtrk.rows() {
            let k = distinct
                .binary_search_by(|x| x.total_cmp(&iou[i * qtrk.rows() + j]))
                .expect("value was collected above");
            for ((a, b), gv) in qt.row(i).iter().zip(qtrk.row(j)).zip(g.row(k)) {
                out.push(a * b + gv);
            }
        }
    }
    Tensor2::from_vec(iou.len(), d, out)
}

/// `e` holds `N_t·n_trk` pair rows. With no tracklets the result is empty.
pub fn gated_affinity(e: &Tensor2, n_trk: usize, w: &Tensor2, w_gate: &Tensor2) -> Result<GatedAffinity> {
    if n_trk == 0 {
        return Ok(GatedAffinity::empty(0));
    }
    if !e.rows().is_multiple_of(n_trk) {
        return Err(Error::Shape(format!("{} pair rows for {n_trk} tracklets", e.rows())));
    }
    if w.shape() != (e.cols(), 1) || w_gate.shape() != (e.cols(), 1) {
        return Err(Error::Shape(format!("projections must be {} x 1", e.cols())));
    }
    if !e.is_finite() {
        return Err(Error::NonFinite("affinity features".into()));
    }
    let mut tape = Tape::new();
    let ev = tape.leaf(e.clone());
    let (wv, gv) = (tape.leaf(w.clone()), tape.leaf(w_gate.clone()));
    let out = gated_affinity_on_tape(&mut tape, ev, wv, gv, e.rows() / n_trk, n_trk, false);
    Ok(GatedAffinity {
        m: tape.value(out.m).clone(),
        c: tape.value(out.c).clone(),
        a: tape.value(out.a).clone(),
    })
}

/// Evaluates the head stored under `names` between two query sets.
pub fn affinity_between(
    params: &ParamSet,
    names: &AffinityNames,
    qt: &Tensor2,
    bt: &[Aabb],
    qtrk: &Tensor2,
    btrk: &[Aabb],
) -> Result<GatedAffinity> {
    if qtrk.rows() == 0 {
        return Ok(GatedAffinity::empty(qt.rows()));
    }
    let e = affinity_features(qt, qtrk, bt, btrk, &params.mlp(&names.geo)?)?;
    if qt.rows() == 0 {
        return Ok(GatedAffinity {
            m: Tensor2::zeros(0, qtrk.rows()),
            c: Tensor2::zeros(0, qtrk.rows()),
            a: Tensor2::zeros(0, qtrk.rows()),
        });
    }
    gated_affinity(&e, qtrk.rows(), params.require(&names.w)?, params.require(&names.w_gate)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::sigmoid;
    use crate::model::{init_params, ModelDims};
    use proptest::prelude::*;

    fn zero_geo(d: usize) -> MlpParams {
        MlpParams::new(
            vec![
                (Tensor2::zeros(1, 3), Tensor2::zeros(1, 3)),
                (Tensor2::zeros(3, d), Tensor2::zeros(1, d)),
            ],
            Activation::Relu,
        )
        .unwrap()
    }

    fn unit_box() -> Aabb {
        Aabb::new([0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn hadamard_of_ones() {
        let ones = Tensor2::filled(1, 4, 1.0);
        let e = affinity_features(&ones, &ones, &[unit_box()], &[unit_box()], &zero_geo(4)).unwrap();
        assert_eq!(e.data(), &[1.0; 4]);
    }

    #[test]
    fn orthogonal_one_hots() {
        let a = Tensor2::from_rows(&[[1.0, 0.0, 0.0]], 3).unwrap();
        let b = Tensor2::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 3).unwrap();
        let e = affinity_features(&a, &b, &[unit_box()], &[unit_box(); 2], &zero_geo(3)).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn features_match_loop_reference() {
        let p = init_params(&ModelDims { feature_dim: 2, embed_dim: 5, hidden_dim: 3 }, 8);
        let geo = p.mlp("ltm.geo").unwrap();
        let qt = Tensor2::from_rows(&[[0.1, 0.5, -0.3, 1.0, 0.0], [2.0, -1.0, 0.0, 0.3, 0.7]], 5).unwrap();
        let qk = Tensor2::from_rows(&[[1.0, 1.0, 1.0, 1.0, 1.0], [-0.5, 0.5, 2.0, 0.0, 1.5], [0.0; 5]], 5).unwrap();
        let bt = [unit_box(), Aabb::new([0.5, 0.0, 0.0], [2.0, 1.0, 3.0]).unwrap()];
        let bk = [Aabb::new([0.2; 3], [1.2; 3]).unwrap(), unit_box(), Aabb::new([5.0; 3], [6.0; 3]).unwrap()];
        let e = affinity_features(&qt, &qk, &bt, &bk, &geo).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let iou = crate::geom::aabb_iou(&bt[i], &bk[j]);
                let g = crate::diff::mlp_forward(&geo, &Tensor2::scalar(iou)).unwrap();
                for k in 0..5 {
                    let expect = qt.get(i, k) * qk.get(j, k) + g.get(0, k);
                    assert!((e.get(i * 3 + j, k) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn direct_features_equal_the_tape_bitwise() {
        let p = init_params(&ModelDims { feature_dim: 2, embed_dim: 4, hidden_dim: 3 }, 3);
        let geo = p.mlp("ltm.geo").unwrap();
        let qt = Tensor2::from_rows(&[[0.1, 0.5, -0.3, 1.0], [2.0, -1.0, 0.0, 0.3], [0.2; 4]], 4).unwrap();
        let qk = Tensor2::from_rows(&[[1.0, -1.0, 1.0, 0.5], [-0.5, 0.5, 2.0, 0.0]], 4).unwrap();
        let far = Aabb::new([5.0; 3], [6.0; 3]).unwrap();
        let bt = [unit_box(), far, Aabb::new([0.5, 0.0, 0.0], [2.0, 1.0, 3.0]).unwrap()];
        let bk = [Aabb::new([0.2; 3], [1.2; 3]).unwrap(), far];
        let direct = affinity_features(&qt, &qk, &bt, &bk, &geo).unwrap();

        let mut tape = Tape::new();
        let layers: Vec<(Var, Var)> =
            geo.layers.iter().map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone()))).collect();
        let (a, b) = (tape.leaf(qt), tape.leaf(qk));
        let (ba, bb) = (tape.leaf(boxes_to_tensor(&bt)), tape.leaf(boxes_to_tensor(&bk)));
        let e = affinity_features_on_tape(&mut tape, &layers, a, b, ba, bb);
        let bits = |t: &Tensor2| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&direct), bits(tape.value(e)));
    }

    #[test]
    fn single_tracklet_gate_is_the_affinity() {
        let e = Tensor2::from_rows(&[[0.3, -0.2], [1.0, 0.4]], 2).unwrap();
        let w = Tensor2::col_vector(&[1.0, 2.0]);
        let wg = Tensor2::col_vector(&[-1.0, 0.5]);
        let g = gated_affinity(&e, 1, &w, &wg).unwrap();
        assert_eq!(g.m.data(), &[1.0, 1.0]);
        assert_eq!(g.a, g.c);
    }

    #[test]
    fn constant_logits_are_uniform() {
        let e = Tensor2::from_rows(&[[1.0, 0.0], [1.0, 5.0], [1.0, -2.0], [1.0, 0.3]], 2).unwrap();
        let w = Tensor2::col_vector(&[0.7, 0.0]);
        let g = gated_affinity(&e, 4, &w, &w).unwrap();
        for x in g.m.data() {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_evaluated_scores() {
        // one segment, two tracklets: logits w·e = (0.5, -0.25), gate w'·e = (1.0, 0.0)
        let e = Tensor2::from_rows(&[[0.5, 1.0], [-0.25, 0.0]], 2).unwrap();
        let w = Tensor2::col_vector(&[1.0, 0.0]);
        let wg = Tensor2::col_vector(&[0.0, 1.0]);
        let g = gated_affinity(&e, 2, &w, &wg).unwrap();
        let m0 = 1.0 / (1.0 + (-0.75f64).exp());
        assert!((g.m.get(0, 0) - m0).abs() < 1e-15);
        assert!((g.m.get(0, 1) - (1.0 - m0)).abs() < 1e-15);
        assert!((g.c.get(0, 0) - sigmoid(1.0)).abs() < 1e-15);
        assert_eq!(g.c.get(0, 1), 0.5);
        assert!((g.a.get(0, 0) - m0 * sigmoid(1.0)).abs() < 1e-15);
    }

    #[test]
    fn no_tracklets_is_empty() {
        let g = gated_affinity(&Tensor2::zeros(0, 3), 0, &Tensor2::zeros(3, 1), &Tensor2::zeros(3, 1)).unwrap();
        assert_eq!(g.a.len(), 0);
    }

    proptest! {
        #[test]
        fn gate_only_shrinks(seed in 0u64..200, n_t in 1usize..5, n_trk in 1usize..5, s in 0.1f64..20.0) {
            let mut p = init_params(&ModelDims { feature_dim: 2, embed_dim: 4, hidden_dim: 3 }, seed);
            for (_, t) in p.iter_mut() {
                *t = t.map(|x| x * s);
            }
            let names = AffinityNames::new("ltm");
            let row = |i: usize| -> Vec<f64> { (0..4).map(|k| ((seed + i as u64 * 7 + k as u64) as f64).sin()).collect() };
            let qt = Tensor2::from_rows(&(0..n_t).map(row).collect::<Vec<_>>(), 4).unwrap();
            let qk = Tensor2::from_rows(&(10..10 + n_trk).map(row).collect::<Vec<_>>(), 4).unwrap();
            let bx = |i: usize| Aabb::new([i as f64 * 0.3; 3], [i as f64 * 0.3 + 1.0; 3]).unwrap();
            let bt: Vec<Aabb> = (0..n_t).map(bx).collect();
            let bk: Vec<Aabb> = (0..n_trk).map(bx).collect();
            let g = affinity_between(&p, &names, &qt, &bt, &qk, &bk).unwrap();
            for i in 0..n_t {
                prop_assert!((g.m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for j in 0..n_trk {
                    prop_assert!(g.a.get(i, j) <= g.m.get(i, j));
                    prop_assert!(g.c.get(i, j) >= 0.0 && g.c.get(i, j) <= 1.0);
                }
            }
        }
    }
}
