use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::VehicleState;

/// Resolves overlaps after the kinematic update and returns the colliding
/// pairs `(low id, high id)`, each at most once.
///
/// Lateral conflicts come first: a vehicle that moved into a lane where it
/// overlaps another vehicle at the pre-step positions is put back into its
/// old lane. Then, lane by lane in pre-step order, a vehicle that ended up
/// closer than one body length behind (or past) its leader is placed exactly
/// one body length behind it and takes the leader's speed.
pub fn detect_collisions(pre: &[VehicleState], next: &mut [VehicleState], body_length: f64) -> Vec<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    let n = next.len();
    let active: Vec<usize> = (0..n).filter(|&i| pre[i].is_active()).collect();

    loop {
        let mut reverted = false;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[ai + 1..] {
                if next[a].lane != next[b].lane || libm::fabs(pre[a].x - pre[b].x) >= body_length {
                    continue;
                }
                let a_moved = next[a].lane != pre[a].lane;
                let b_moved = next[b].lane != pre[b].lane;
                if !a_moved && !b_moved {
                    continue;
                }
                pairs.insert((a.min(b), a.max(b)));
                for (i, moved) in [(a, a_moved), (b, b_moved)] {
                    if moved {
                        next[i].lane = pre[i].lane;
                        next[i].lc_history &= !1;
                        reverted = true;
                    }
                }
            }
        }
        if !reverted {
            break;
        }
    }

    let mut lanes: Vec<usize> = active.iter().map(|&i| next[i].lane).collect();
    lanes.sort_unstable();
    lanes.dedup();
    for lane in lanes {
        let mut order: Vec<usize> = active.iter().copied().filter(|&i| next[i].lane == lane).collect();
        // front to back by pre-step position
        order.sort_by(|&a, &b| pre[b].x.total_cmp(&pre[a].x).then(a.cmp(&b)));
        for w in 1..order.len() {
            let (front, rear) = (order[w - 1], order[w]);
            let limit = next[front].x - body_length;
            if next[rear].x > limit {
                pairs.insert((front.min(rear), front.max(rear)));
                next[rear].x = limit;
                next[rear].v = next[front].v;
            }
        }
    }
    pairs.into_iter().collect()
}
