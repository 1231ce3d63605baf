//! Hand-set parameters whose association depends on box overlap alone.

use crate::diff::{ParamSet, Tensor2};
use crate::error::{Error, Result};
use crate::model::{init_params, names, AffinityNames, ModelDims};

/// Gain on the overlap channel of the affinity features.
pub const ORACLE_GAIN: f64 = 20.0;
/// Box overlap at which the oracle gate reads 0.5.
pub const ORACLE_GATE_IOU: f64 = 0.25;

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Starts from the seeded initialisation and then
/// * clears embedding channels 0 and 1 and every residual value path, so
///   those channels stay zero downstream;
/// * makes each box a cube of side `box_side` on the mask centroid;
/// * routes the box IoU into channel 0 (match logit `GAIN·IoU`) and
///   `IoU − ORACLE_GATE_IOU` into channel 1 (gate logit), for both affinity
///   heads.
pub fn oracle_params(dims: &ModelDims, seed: u64, box_side: f64) -> Result<ParamSet> {
    let (d, h) = (dims.embed_dim, dims.hidden_dim);
    if d < 2 || !(box_side > 0.0) {
        return Err(Error::Config("oracle needs embed_dim >= 2 and a positive box side".into()));
    }
    let mut p = init_params(dims, seed);
    for name in ["pool.1.weight", "pool.1.bias"] {
        let t = p.get_mut(name).expect("pool layer");
        for r in 0..t.rows() {
            t.set(r, 0, 0.0);
            t.set(r, 1, 0.0);
        }
    }
    p.insert(names::ATTN_V, Tensor2::zeros(d, d));
    p.insert(names::STM_VALUE, Tensor2::zeros(d, d));
    p.insert("box.1.weight", Tensor2::zeros(h, 6));
    let s = softplus_inverse(box_side);
    p.insert("box.1.bias", Tensor2::row_vector(&[0.0, 0.0, 0.0, s, s, s]));
    p.insert(names::OBJ_W, Tensor2::zeros(d, 1));
    p.insert(names::OBJ_B, Tensor2::scalar(2.0));
    for prefix in [names::LTM, names::LMI] {
        let n = AffinityNames::new(prefix);
        let mut w0 = Tensor2::zeros(1, h);
        w0.set(0, 0, 1.0);
        p.insert(format!("{}.0.weight", n.geo), w0);
        p.insert(format!("{}.0.bias", n.geo), Tensor2::zeros(1, h));
        let mut w1 = Tensor2::zeros(h, d);
        w1.set(0, 0, 1.0);
        w1.set(0, 1, 1.0);
        p.insert(format!("{}.1.weight", n.geo), w1);
        let mut b1 = Tensor2::zeros(1, d);
        b1.set(0, 1, -ORACLE_GATE_IOU);
        p.insert(format!("{}.1.bias", n.geo), b1);
        let mut w = Tensor2::zeros(d, 1);
        w.set(0, 0, ORACLE_GAIN);
        p.insert(n.w, w);
        let mut g = Tensor2::zeros(d, 1);
        g.set(1, 0, ORACLE_GAIN);
        p.insert(n.w_gate, g);
    }
    Ok(p)
}
