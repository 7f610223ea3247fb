//! Pairwise minutiae matcher.
//!
//! Every probe/gallery minutia pair proposes a rigid alignment (rotation
//! about the frame center plus translation). Proposals are binned, the most
//! voted bins are refined to their mean alignment, and each refined alignment
//! is scored by greedy one-to-one pairing. The score is
//! `2 * matched / (|p| + |g|)`, maximized over the evaluated alignments.

use std::f64::consts::{PI, TAU};

use crate::minutiae::{orientation_diff, Minutia, MinutiaeSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchConfig {
    /// Max distance (pixels) between paired minutiae after alignment; also
    /// the translation bin width.
    pub distance_tolerance: f64,
    /// Max orientation difference (radians) between paired minutiae.
    pub angle_tolerance: f64,
    /// Number of rotation bins covering `[-max_rotation, max_rotation]`.
    pub rotation_steps: usize,
    pub max_rotation: f64,
    pub max_translation: f64,
    /// How many of the most voted alignment bins get a full pairing pass.
    pub hypotheses: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            distance_tolerance: 12.0,
            angle_tolerance: PI / 9.0,
            rotation_steps: 24,
            max_rotation: PI / 3.0,
            max_translation: 224.0,
            hypotheses: 8,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.distance_tolerance)
            || !positive(self.angle_tolerance)
            || !positive(self.max_rotation)
            || !positive(self.max_translation)
        {
            return Err(crate::Error::Config(
                "matcher tolerances must be positive".into(),
            ));
        }
        if self.rotation_steps == 0 || self.hypotheses == 0 {
            return Err(crate::Error::Config(
                "rotation_steps and hypotheses must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// A rigid alignment: rotate by `angle` about `center`, then translate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alignment {
    pub angle: f64,
    pub tx: f64,
    pub ty: f64,
    pub center: (f64, f64),
}

impl Alignment {
    pub fn apply(&self, m: &Minutia) -> (f64, f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (cx, cy) = self.center;
        let (dx, dy) = (f64::from(m.x) - cx, f64::from(m.y) - cy);
        (
            cx + c * dx - s * dy + self.tx,
            cy + s * dx + c * dy + self.ty,
            (f64::from(m.theta) + self.angle).rem_euclid(TAU),
        )
    }

    /// The alignment carrying `p` exactly onto `g`.
    pub fn from_pair(p: &Minutia, g: &Minutia, center: (f64, f64)) -> Self {
        let angle = signed_angle(f64::from(g.theta) - f64::from(p.theta));
        let mut a = Alignment {
            angle,
            tx: 0.0,
            ty: 0.0,
            center,
        };
        let (x, y, _) = a.apply(p);
        a.tx = f64::from(g.x) - x;
        a.ty = f64::from(g.y) - y;
        a
    }
}

fn signed_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Applies a rigid transform about the frame center, dropping minutiae that
/// leave the frame.
pub fn rigid_transform(set: &MinutiaeSet, angle: f64, tx: f64, ty: f64) -> MinutiaeSet {
    let a = Alignment {
        angle,
        tx,
        ty,
        center: frame_center(set),
    };
    let (w, h) = (f64::from(set.width()), f64::from(set.height()));
    let moved = set
        .minutiae()
        .iter()
        .filter_map(|m| {
            let (x, y, t) = a.apply(m);
            let (xf, yf) = (x as f32, y as f32);
            (xf >= 0.0 && yf >= 0.0 && f64::from(xf) < w && f64::from(yf) < h)
                .then(|| Minutia::new(xf, yf, t as f32))
        })
        .collect();
    MinutiaeSet::new(set.width(), set.height(), moved).expect("filtered to frame")
}

fn frame_center(set: &MinutiaeSet) -> (f64, f64) {
    (f64::from(set.width()) / 2.0, f64::from(set.height()) / 2.0)
}

/// Number of one-to-one pairs under `align`, paired greedily by distance,
/// then angle difference, then input order.
pub fn count_pairs(p: &[Minutia], g: &[Minutia], align: &Alignment, cfg: &MatchConfig) -> usize {
    let moved: Vec<(f64, f64, f64)> = p.iter().map(|m| align.apply(m)).collect();
    let tol_sq = cfg.distance_tolerance * cfg.distance_tolerance;
    let mut cands: Vec<(f64, f64, u32, u32)> = Vec::new();
    for (i, &(x, y, t)) in moved.iter().enumerate() {
        for (j, q) in g.iter().enumerate() {
            let dx = x - f64::from(q.x);
            let dy = y - f64::from(q.y);
            let d2 = dx * dx + dy * dy;
            if d2 > tol_sq {
                continue;
            }
            let da = orientation_diff(t, f64::from(q.theta));
            if da <= cfg.angle_tolerance {
                cands.push((d2, da, i as u32, j as u32));
            }
        }
    }
    cands.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut used_p = vec![false; p.len()];
    let mut used_g = vec![false; g.len()];
    let mut matched = 0;
    for (_, _, i, j) in cands {
        let (i, j) = (i as usize, j as usize);
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matched += 1;
        }
    }
    matched
}

#[derive(Clone, Copy)]
struct Vote {
    bin: (u32, i32, i32),
    angle: f64,
    tx: f64,
    ty: f64,
}

/// Similarity in `[0, 1]` between two minutiae sets.
pub fn minutiae_score(p: &MinutiaeSet, g: &MinutiaeSet, cfg: &MatchConfig) -> f64 {
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let p = if (p.width(), p.height()) == (g.width(), g.height()) {
        std::borrow::Cow::Borrowed(p)
    } else {
        match p.scale_to(g.width(), g.height()) {
            Ok(s) => std::borrow::Cow::Owned(s),
            Err(_) => return 0.0,
        }
    };
    let center = frame_center(g);
    let rot_bin = 2.0 * cfg.max_rotation / cfg.rotation_steps as f64;
    let max_t_sq = cfg.max_translation * cfg.max_translation;

    let mut votes = Vec::with_capacity(p.len() * g.len());
    for pm in p.minutiae() {
        for gm in g.minutiae() {
            let a = Alignment::from_pair(pm, gm, center);
            if a.angle.abs() > cfg.max_rotation || a.tx * a.tx + a.ty * a.ty > max_t_sq {
                continue;
            }
            let r = (((a.angle + cfg.max_rotation) / rot_bin).floor() as i64)
                .clamp(0, cfg.rotation_steps as i64 - 1) as u32;
            let bx = (a.tx / cfg.distance_tolerance).floor() as i32;
            let by = (a.ty / cfg.distance_tolerance).floor() as i32;
            votes.push(Vote {
                bin: (r, bx, by),
                angle: a.angle,
                tx: a.tx,
                ty: a.ty,
            });
        }
    }
    if votes.is_empty() {
        return 0.0;
    }
    votes.sort_by(|a, b| a.bin.cmp(&b.bin));

    // (count, first vote index) per bin, then most voted first.
    let mut bins: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=votes.len() {
        if i == votes.len() || votes[i].bin != votes[start].bin {
            bins.push((i - start, start));
            start = i;
        }
    }
    bins.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));

    let total = (p.len() + g.len()) as f64;
    let mut best = 0usize;
    for &(count, first) in bins.iter().take(cfg.hypotheses) {
        let members = &votes[first..first + count];
        let n = count as f64;
        let (s, c) = members
            .iter()
            .fold((0.0, 0.0), |(s, c), v| (s + v.angle.sin(), c + v.angle.cos()));
        let align = Alignment {
            angle: s.atan2(c),
            tx: members.iter().map(|v| v.tx).sum::<f64>() / n,
            ty: members.iter().map(|v| v.ty).sum::<f64>() / n,
            center,
        };
        best = best.max(count_pairs(p.minutiae(), g.minutiae(), &align, cfg));
    }
    2.0 * best as f64 / total
}
