use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::ltm::TrackDump;
use crate::sim::SequenceFile;

/// Stable colour of a track id (splitmix64 finaliser, low 24 bits).
pub fn track_color(id: u64) -> [u8; 3] {
    let mut z = id.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    [(z >> 16) as u8, (z >> 8) as u8, z as u8]
}

/// ASCII point cloud with one vertex per labelled point, coloured by the id
/// that labelled it last. Vertices are ordered by global point id.
pub fn export_ply(dump: &TrackDump, seq: &SequenceFile) -> Result<String> {
    let mut position: BTreeMap<u32, Vec3> = BTreeMap::new();
    for f in &seq.frames {
        for (id, p) in f.point_ids.iter().zip(&f.points) {
            position.insert(*id, *p);
        }
    }
    let mut owner: BTreeMap<u32, u64> = BTreeMap::new();
    for f in &dump.frames {
        for tr in &f.tracks {
            for &p in &tr.points {
                owner.insert(p, tr.id);
            }
        }
    }
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment sequence {}", dump.sequence_id);
    let _ = writeln!(out, "element vertex {}", owner.len());
    out.push_str(
        "property double x\nproperty double y\nproperty double z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property uint track\nend_header\n",
    );
    for (p, id) in &owner {
        let [x, y, z] = position
            .get(p)
            .ok_or_else(|| Error::InvalidInput(format!("point {p} is not in the sequence")))?;
        let [r, g, b] = track_color(*id);
        let _ = writeln!(out, "{x} {y} {z} {r} {g} {b} {id}");
    }
    Ok(out)
}
