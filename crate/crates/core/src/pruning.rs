//! Structured pruning machinery: parameter-group maps for output
//! neurons/filters (with next-layer input coupling), saliency criteria
//! (second-order, l1 magnitude, weight variation), a running diagonal
//! curvature estimate, and per-client mask generation under rank-based
//! pruning ratios.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Architecture, FeatureShape, LayerSpec};
use crate::seeds::rng_from;

/// One prunable output unit: a dense neuron or a conv filter. Zeroing
/// the unit removes its own weights+bias and the coordinates in the
/// next layer that read its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneGroup {
    pub layer: usize,
    pub unit: usize,
    pub own_coords: Vec<usize>,
    pub coupled_coords: Vec<usize>,
}

/// All prunable units of an architecture. Output units of the final
/// (logit-producing) layer are never prunable.
#[derive(Debug, Clone)]
pub struct GroupMap {
    pub groups: Vec<PruneGroup>,
    /// Total coordinates in the union of own+coupled over all groups.
    pub prunable_coords: usize,
    /// Model dimension d.
    pub dim: usize,
}

pub fn build_group_map(arch: &Architecture) -> Result<GroupMap> {
    arch.validate()?;
    let index = arch.param_index();
    let shapes = arch.feature_shapes()?;
    let dim = index.total;

    let param_layers: Vec<usize> = (0..arch.layers.len())
        .filter(|&i| arch.layers[i].is_parameterized())
        .collect();
    if let Some(&last) = param_layers.last() {
        if matches!(arch.layers[last], LayerSpec::Conv2d { .. }) {
            return Err(Error::config(
                "the logit-producing layer must be dense; a conv head would make \
                 class outputs prunable",
            ));
        }
    }

    let mut groups = Vec::new();
    for (pi, &li) in param_layers.iter().enumerate() {
        if pi + 1 == param_layers.len() {
            break; // class outputs must survive
        }
        let next_li = param_layers[pi + 1];
        let ranges = &index.layers[li];
        let next_ranges = &index.layers[next_li];

        match arch.layers[li] {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                for unit in 0..out_dim {
                    let mut own: Vec<usize> = (ranges.weights.start + unit * in_dim
                        ..ranges.weights.start + (unit + 1) * in_dim)
                        .collect();
                    own.push(ranges.biases.start + unit);
                    let coupled = consumer_coords(&arch.layers[next_li], next_ranges, unit, 1);
                    groups.push(PruneGroup {
                        layer: li,
                        unit,
                        own_coords: own,
                        coupled_coords: coupled,
                    });
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => {
                // A pruned filter couples to everything reading its
                // output channel. Through a flatten, that is the whole
                // spatial map of the channel.
                let spatial = match shapes[li] {
                    FeatureShape::Image { height, width, .. } => height * width,
                    FeatureShape::Flat(_) => unreachable!("conv output is an image"),
                };
                let per_filter = in_channels * kernel_h * kernel_w;
                for unit in 0..out_channels {
                    let mut own: Vec<usize> = (ranges.weights.start + unit * per_filter
                        ..ranges.weights.start + (unit + 1) * per_filter)
                        .collect();
                    own.push(ranges.biases.start + unit);
                    let coupled =
                        consumer_coords(&arch.layers[next_li], next_ranges, unit, spatial);
                    groups.push(PruneGroup {
                        layer: li,
                        unit,
                        own_coords: own,
                        coupled_coords: coupled,
                    });
                }
            }
            LayerSpec::Flatten => unreachable!("filtered to parameterized layers"),
        }
    }

    let mut covered = vec![false; dim];
    for g in &groups {
        for &c in g.own_coords.iter().chain(&g.coupled_coords) {
            covered[c] = true;
        }
    }
    let prunable_coords = covered.iter().filter(|&&b| b).count();
    Ok(GroupMap {
        groups,
        prunable_coords,
        dim,
    })
}

/// Coordinates in `next` that read output unit `unit` of the previous
/// layer. `span` is 1 for dense outputs and the spatial map size for a
/// conv channel feeding a flatten.
fn consumer_coords(
    next: &LayerSpec,
    next_ranges: &crate::nn::LayerRanges,
    unit: usize,
    span: usize,
) -> Vec<usize> {
    match *next {
        LayerSpec::Dense { in_dim, out_dim, .. } => {
            let mut coords = Vec::with_capacity(out_dim * span);
            for o in 0..out_dim {
                for s in 0..span {
                    coords.push(next_ranges.weights.start + o * in_dim + unit * span + s);
                }
            }
            coords
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => {
            debug_assert_eq!(span, 1, "conv consumes channels directly");
            let k = kernel_h * kernel_w;
            let mut coords = Vec::with_capacity(out_channels * k);
            for o in 0..out_channels {
                let base = next_ranges.weights.start + (o * in_channels + unit) * k;
                coords.extend(base..base + k);
            }
            coords
        }
        LayerSpec::Flatten => unreachable!("next is a parameterized layer"),
    }
}

/// Binary mask over model coordinates; 0 marks a pruned coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    pub bits: Vec<u8>,
    pub achieved_ratio_num: usize,
    pub client: usize,
    pub round: usize,
}

impl PruneMask {
    pub fn all_ones(dim: usize, client: usize, round: usize) -> Self {
        PruneMask {
            bits: vec![1; dim],
            achieved_ratio_num: 0,
            client,
            round,
        }
    }

    pub fn dim(&self) -> usize {
        self.bits.len()
    }

    /// Fraction of coordinates zeroed.
    pub fn achieved_ratio(&self) -> f64 {
        self.achieved_ratio_num as f64 / self.bits.len() as f64
    }

    pub fn active_count(&self) -> usize {
        self.bits.len() - self.achieved_ratio_num
    }

    /// Hadamard product of the mask with a value vector.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.bits
            .iter()
            .zip(values)
            .map(|(&m, &v)| m as f64 * v)
            .collect()
    }

    pub fn apply_in_place(&self, values: &mut [f64]) {
        for (v, &m) in values.iter_mut().zip(&self.bits) {
            *v *= m as f64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Curvature,
    L1,
    DeltaW,
    Random,
}

/// Per-coordinate saliency values with per-group aggregates
/// (sum over each group's own coordinates).
#[derive(Debug, Clone)]
pub struct SaliencyScores {
    pub per_coord: Vec<f64>,
    pub per_group: Vec<f64>,
    pub criterion: CriterionKind,
}

fn aggregate_groups(per_coord: &[f64], map: &GroupMap) -> Vec<f64> {
    map.groups
        .iter()
        .map(|g| g.own_coords.iter().map(|&c| per_coord[c]).sum())
        .collect()
}

/// Running nonnegative diagonal-curvature estimate.
#[derive(Debug, Clone)]
pub struct CurvatureEstimate {
    pub h: Vec<f64>,
    pub method: CurvatureMethod,
    /// Number of negative entries clamped to zero (oracle estimates only).
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvatureMethod {
    EmpiricalFisher,
    FdOracle,
}

impl CurvatureEstimate {
    pub fn zeros(dim: usize) -> Self {
        CurvatureEstimate {
            h: vec![0.0; dim],
            method: CurvatureMethod::EmpiricalFisher,
            clamped: 0,
        }
    }

    /// Wraps a finite-difference Hessian diagonal, clamping negative
    /// entries to zero before they can enter a score.
    pub fn from_fd_oracle(mut h: Vec<f64>) -> Self {
        let mut clamped = 0;
        for v in h.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        CurvatureEstimate {
            h,
            method: CurvatureMethod::FdOracle,
            clamped,
        }
    }
}

/// Empirical-Fisher update of the running curvature estimate:
/// `h <- beta * h + (1 - beta) * mean(g^2)` over the gradient samples.
pub fn estimate_curvature(
    state: &CurvatureEstimate,
    grad_samples: &[Vec<f64>],
    beta: f64,
) -> Result<CurvatureEstimate> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::input(format!("beta {beta} outside [0, 1)")));
    }
    if grad_samples.is_empty() {
        return Err(Error::input(
            "estimate_curvature needs at least one gradient sample",
        ));
    }
    let dim = state.h.len();
    let mut mean_sq = vec![0.0; dim];
    for g in grad_samples {
        if g.len() != dim {
            return Err(Error::shape(format!(
                "gradient sample length {} vs curvature state {dim}",
                g.len()
            )));
        }
        for (m, &gi) in mean_sq.iter_mut().zip(g) {
            *m += gi * gi;
        }
    }
    let inv = 1.0 / grad_samples.len() as f64;
    let h = state
        .h
        .iter()
        .zip(&mean_sq)
        .map(|(&hi, &sq)| beta * hi + (1.0 - beta) * sq * inv)
        .collect();
    Ok(CurvatureEstimate {
        h,
        method: CurvatureMethod::EmpiricalFisher,
        clamped: 0,
    })
}

/// Second-order significance score `s_i = g_i w_i + h_i w_i^2`, or the
/// late-round approximation `s_i = h_i w_i^2` when `gradient_term` is
/// off.
pub fn score_curvature(
    w: &[f64],
    grad: &[f64],
    curvature: &CurvatureEstimate,
    map: &GroupMap,
    gradient_term: bool,
) -> Result<SaliencyScores> {
    if w.len() != curvature.h.len() || (gradient_term && grad.len() != w.len()) {
        return Err(Error::shape(
            "score_curvature inputs must be aligned".to_string(),
        ));
    }
    let per_coord: Vec<f64> = (0..w.len())
        .map(|i| {
            let quad = curvature.h[i] * w[i] * w[i];
            if gradient_term {
                grad[i] * w[i] + quad
            } else {
                quad
            }
        })
        .collect();
    let per_group = aggregate_groups(&per_coord, map);
    Ok(SaliencyScores {
        per_coord,
        per_group,
        criterion: CriterionKind::Curvature,
    })
}

/// Magnitude criterion: group score is the l1 norm of its own weights.
pub fn score_l1(w: &[f64], map: &GroupMap) -> SaliencyScores {
    let per_coord: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    let per_group = aggregate_groups(&per_coord, map);
    SaliencyScores {
        per_coord,
        per_group,
        criterion: CriterionKind::L1,
    }
}

/// Weight-variation criterion: `s_i = |w_now_i - w_prev_i|`.
pub fn score_delta_w(w_now: &[f64], w_prev: &[f64], map: &GroupMap) -> Result<SaliencyScores> {
    if w_now.len() != w_prev.len() {
        return Err(Error::shape(
            "score_delta_w vectors must be aligned".to_string(),
        ));
    }
    let per_coord: Vec<f64> = w_now
        .iter()
        .zip(w_prev)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let per_group = aggregate_groups(&per_coord, map);
    Ok(SaliencyScores {
        per_coord,
        per_group,
        criterion: CriterionKind::DeltaW,
    })
}

/// Generates a hard structured mask. During warmup rounds groups are
/// zeroed in seeded random order; afterwards in ascending group-score
/// order (ties broken by group index). Whole groups (own plus coupled
/// coordinates) are zeroed until the zeroed fraction of all
/// coordinates first reaches `target_ratio`.
pub fn generate_mask(
    scores: Option<&SaliencyScores>,
    map: &GroupMap,
    target_ratio: f64,
    round: usize,
    warmup_rounds: usize,
    seed: u64,
    client: usize,
) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&target_ratio) {
        return Err(Error::config(format!(
            "target_ratio {target_ratio} outside [0, 1)"
        )));
    }
    if target_ratio == 0.0 {
        return Ok(PruneMask::all_ones(map.dim, client, round));
    }
    let max_ratio = map.prunable_coords as f64 / map.dim as f64;
    if target_ratio >= max_ratio {
        return Err(Error::config(format!(
            "target_ratio {target_ratio} >= prunable fraction {max_ratio:.4}"
        )));
    }

    let order: Vec<usize> = if round < warmup_rounds {
        let mut idx: Vec<usize> = (0..map.groups.len()).collect();
        idx.shuffle(&mut rng_from(seed));
        idx
    } else {
        let scores = scores.ok_or_else(|| {
            Error::config("scored mask generation requires saliency scores after warmup")
        })?;
        if scores.per_group.len() != map.groups.len() {
            return Err(Error::shape(format!(
                "scores cover {} groups, map has {}",
                scores.per_group.len(),
                map.groups.len()
            )));
        }
        if scores.per_group.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("non-finite group score".to_string()));
        }
        let mut idx: Vec<usize> = (0..map.groups.len()).collect();
        idx.sort_by(|&a, &b| {
            scores.per_group[a]
                .total_cmp(&scores.per_group[b])
                .then(a.cmp(&b))
        });
        idx
    };

    let mut bits = vec![1u8; map.dim];
    let mut zeroed = 0usize;
    let need = (target_ratio * map.dim as f64).ceil() as usize;
    for &gi in &order {
        if zeroed >= need {
            break;
        }
        let g = &map.groups[gi];
        for &c in g.own_coords.iter().chain(&g.coupled_coords) {
            if bits[c] == 1 {
                bits[c] = 0;
                zeroed += 1;
            }
        }
    }
    Ok(PruneMask {
        bits,
        achieved_ratio_num: zeroed,
        client,
        round,
    })
}

/// Resource-tier specification for per-client pruning ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSpec {
    /// Named tiers 0-3, defined for populations of 10 clients.
    Rank(u8),
    /// Explicit per-client ratio list.
    Explicit(Vec<f64>),
}

/// Maps a rank spec to per-client target pruning ratios.
pub fn assign_ranks(num_clients: usize, spec: &RankSpec) -> Result<Vec<f64>> {
    match spec {
        RankSpec::Rank(r) => {
            if num_clients != 10 {
                return Err(Error::config(format!(
                    "rank: named ranks require K=10 clients (got K={num_clients}); \
                     use an explicit ratio list"
                )));
            }
            let (a, b) = match r {
                0 => (0.25, 0.0),
                1 => (0.25, 0.50),
                2 => (0.50, 0.75),
                3 => (0.75, 0.90),
                _ => {
                    return Err(Error::config(format!(
                        "rank: unknown rank {r}, expected 0-3"
                    )));
                }
            };
            let mut ratios = vec![a; 5];
            ratios.extend(vec![b; 5]);
            Ok(ratios)
        }
        RankSpec::Explicit(list) => {
            if list.len() != num_clients {
                return Err(Error::config(format!(
                    "ratios: explicit list has {} entries for K={num_clients}",
                    list.len()
                )));
            }
            for &r in list {
                if !(0.0..1.0).contains(&r) {
                    return Err(Error::config(format!("ratios: ratio {r} outside [0, 1)")));
                }
            }
            Ok(list.clone())
        }
    }
}

/// All masks that zero exactly `zero_count` groups; oracle helper for
/// exhaustive criterion checks on small nets.
pub fn enumerate_group_masks(map: &GroupMap, zero_count: usize) -> Vec<(Vec<usize>, PruneMask)> {
    let n = map.groups.len();
    let mut result = Vec::new();
    if zero_count == 0 || zero_count > n {
        return result;
    }
    let mut combo: Vec<usize> = (0..zero_count).collect();
    loop {
        let mut bits = vec![1u8; map.dim];
        let mut zeroed = 0;
        for &gi in &combo {
            let g = &map.groups[gi];
            for &c in g.own_coords.iter().chain(&g.coupled_coords) {
                if bits[c] == 1 {
                    bits[c] = 0;
                    zeroed += 1;
                }
            }
        }
        result.push((
            combo.clone(),
            PruneMask {
                bits,
                achieved_ratio_num: zeroed,
                client: 0,
                round: 0,
            },
        ));
        // Next lexicographic combination.
        let mut i = zero_count;
        loop {
            if i == 0 {
                return result;
            }
            i -= 1;
            if combo[i] != i + n - zero_count {
                break;
            }
        }
        combo[i] += 1;
        for j in i + 1..zero_count {
            combo[j] = combo[j - 1] + 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn dense_chain() -> Architecture {
        Architecture::new(
            FeatureShape::Flat(4),
            vec![
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 3,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 2,
                    activation: Activation::Identity,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn dense_groups_own_rows_and_couple_to_columns() {
        let map = build_group_map(&dense_chain()).unwrap();
        assert_eq!(map.groups.len(), 3);
        // Layer 0 weights at 0..12, biases 12..15; layer 1 weights 15..21.
        let g1 = &map.groups[1];
        assert_eq!(g1.own_coords, vec![4, 5, 6, 7, 13]);
        assert_eq!(g1.coupled_coords, vec![15 + 1, 15 + 3 + 1]);
    }

    #[test]
    fn conv_groups_couple_through_flatten() {
        // Conv(1->2, 3x3) on 4x4 input -> 2x2x2 -> flatten(8) -> Dense(8->2).
        let arch = Architecture::new(
            FeatureShape::Image {
                channels: 1,
                height: 4,
                width: 4,
            },
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    activation: Activation::Relu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 8,
                    out_dim: 2,
                    activation: Activation::Identity,
                },
            ],
        )
        .unwrap();
        let map = build_group_map(&arch).unwrap();
        assert_eq!(map.groups.len(), 2);
        let g0 = &map.groups[0];
        // Filter 0: 9 weights at 0..9 plus bias at 18.
        let mut own: Vec<usize> = (0..9).collect();
        own.push(18);
        assert_eq!(g0.own_coords, own);
        // Dense weights start at 20; channel 0 spans input cols 0..4.
        let expected: Vec<usize> = vec![20, 21, 22, 23, 28, 29, 30, 31];
        assert_eq!(g0.coupled_coords, expected);
    }

    #[test]
    fn single_layer_has_no_prunable_groups() {
        let arch = Architecture::new(
            FeatureShape::Flat(4),
            vec![LayerSpec::Dense {
                in_dim: 4,
                out_dim: 3,
                activation: Activation::Identity,
            }],
        )
        .unwrap();
        let map = build_group_map(&arch).unwrap();
        assert!(map.groups.is_empty());
        assert_eq!(map.prunable_coords, 0);
    }

    #[test]
    fn conv_head_is_rejected() {
        let arch = Architecture::new(
            FeatureShape::Image {
                channels: 1,
                height: 4,
                width: 4,
            },
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    activation: Activation::Relu,
                },
                LayerSpec::Flatten,
            ],
        )
        .unwrap();
        assert!(build_group_map(&arch).is_err());
    }

    #[test]
    fn fisher_update_examples() {
        let state = CurvatureEstimate::zeros(3);
        let g = vec![vec![1.0, -2.0, 0.5]];
        let h = estimate_curvature(&state, &g, 0.0).unwrap();
        assert_eq!(h.h, vec![1.0, 4.0, 0.25]);

        let decayed = estimate_curvature(&h, &[vec![0.0, 0.0, 0.0]], 0.5).unwrap();
        assert_eq!(decayed.h, vec![0.5, 2.0, 0.125]);
        let decayed2 = estimate_curvature(&decayed, &[vec![0.0, 0.0, 0.0]], 0.5).unwrap();
        assert_eq!(decayed2.h, vec![0.25, 1.0, 0.0625]);
    }

    #[test]
    fn fisher_ranks_like_squared_diagonal_on_quadratic() {
        // F = 0.5 w' diag(a) w with w ~ N(0, I): E[g_i^2] = a_i^2.
        let a: Vec<f64> = (1..=12).map(|i| 0.3 * i as f64).collect();
        let mut rng = rng_from(77);
        let mut samples = Vec::new();
        for _ in 0..400 {
            let g: Vec<f64> = a
                .iter()
                .map(|&ai| {
                    let w: f64 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    ai * w
                })
                .collect();
            samples.push(g);
        }
        let state = estimate_curvature(&CurvatureEstimate::zeros(a.len()), &samples, 0.0).unwrap();
        let target: Vec<f64> = a.iter().map(|&x| x * x).collect();
        let rho = crate::analysis::spearman(&state.h, &target).unwrap();
        assert!(rho > 0.9, "spearman {rho}");
    }

    #[test]
    fn curvature_score_arithmetic() {
        let arch = dense_chain();
        let map = build_group_map(&arch).unwrap();
        let d = arch.param_count();
        let mut w = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut h = CurvatureEstimate::zeros(d);
        w[0] = 3.0;
        h.h[0] = 2.0;
        w[1] = 2.0;
        g[1] = 1.0;
        h.h[1] = 1.0;
        let s = score_curvature(&w, &g, &h, &map, true).unwrap();
        assert_eq!(s.per_coord[0], 18.0);
        assert_eq!(s.per_coord[1], 6.0);
        assert_eq!(s.per_coord[2], 0.0);

        let approx = score_curvature(&w, &g, &h, &map, false).unwrap();
        assert_eq!(approx.per_coord[0], 18.0);
        assert_eq!(approx.per_coord[1], 4.0);
    }

    #[test]
    fn l1_score_sums_absolute_weights() {
        let arch = dense_chain();
        let map = build_group_map(&arch).unwrap();
        let mut w = vec![0.0; arch.param_count()];
        w[0] = 1.0;
        w[1] = -2.0;
        w[2] = 3.0;
        let s = score_l1(&w, &map);
        assert_eq!(s.per_group[0], 6.0);
        assert_eq!(s.per_group[1], 0.0);
        assert_eq!(s.per_group[2], 0.0);
    }

    #[test]
    fn delta_w_score_is_absolute_change() {
        let arch = dense_chain();
        let map = build_group_map(&arch).unwrap();
        let w_prev = vec![0.0; arch.param_count()];
        let mut w_now = w_prev.clone();
        w_now[4] = 0.5;
        let s = score_delta_w(&w_now, &w_prev, &map).unwrap();
        assert_eq!(s.per_coord[4], 0.5);
        assert_eq!(s.per_group[1], 0.5);
        assert_eq!(s.per_group[0], 0.0);
    }

    #[test]
    fn zero_ratio_yields_all_ones() {
        let map = build_group_map(&dense_chain()).unwrap();
        let m = generate_mask(None, &map, 0.0, 0, 5, 1, 0).unwrap();
        assert!(m.bits.iter().all(|&b| b == 1));
        assert_eq!(m.achieved_ratio(), 0.0);
    }

    #[test]
    fn scored_mask_zeroes_lowest_groups_first() {
        // 4 hidden units; distinct scores; ratio just over half the
        // prunable mass picks exactly the 2 lowest-scored groups.
        let arch = Architecture::new(
            FeatureShape::Flat(3),
            vec![
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 4,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 2,
                    activation: Activation::Identity,
                },
            ],
        )
        .unwrap();
        let map = build_group_map(&arch).unwrap();
        assert_eq!(map.groups.len(), 4);
        // Each group: 3 w + 1 b own + 2 coupled = 6 coords; d = 26.
        let scores = SaliencyScores {
            per_coord: vec![0.0; map.dim],
            per_group: vec![3.0, 1.0, 0.5, 2.0],
            criterion: CriterionKind::Curvature,
        };
        let target = 11.0 / 26.0; // needs 11 coords; two groups give 12
        let m = generate_mask(Some(&scores), &map, target, 10, 5, 1, 0).unwrap();
        assert_eq!(m.achieved_ratio_num, 12);
        for &c in map.groups[2]
            .own_coords
            .iter()
            .chain(&map.groups[2].coupled_coords)
        {
            assert_eq!(m.bits[c], 0);
        }
        for &c in map.groups[1]
            .own_coords
            .iter()
            .chain(&map.groups[1].coupled_coords)
        {
            assert_eq!(m.bits[c], 0);
        }
        for &c in &map.groups[0].own_coords {
            assert_eq!(m.bits[c], 1);
        }
        for &c in &map.groups[3].own_coords {
            assert_eq!(m.bits[c], 1);
        }
    }

    #[test]
    fn warmup_masks_are_seeded_and_structured() {
        let map = build_group_map(&dense_chain()).unwrap();
        let a = generate_mask(None, &map, 0.3, 0, 5, 42, 1).unwrap();
        let b = generate_mask(None, &map, 0.3, 0, 5, 42, 1).unwrap();
        assert_eq!(a, b);
        for g in &map.groups {
            let vals: Vec<u8> = g.own_coords.iter().map(|&i| a.bits[i]).collect();
            assert!(vals.iter().all(|&v| v == vals[0]), "group not zeroed whole");
            if vals[0] == 0 {
                for &cc in &g.coupled_coords {
                    assert_eq!(a.bits[cc], 0, "coupled coordinate must follow its group");
                }
            }
        }
    }

    #[test]
    fn over_ratio_is_a_configuration_error() {
        let map = build_group_map(&dense_chain()).unwrap();
        let max_ratio = map.prunable_coords as f64 / map.dim as f64;
        assert!(generate_mask(None, &map, max_ratio, 0, 5, 1, 0).is_err());
    }

    #[test]
    fn rank_tables() {
        let r2 = assign_ranks(10, &RankSpec::Rank(2)).unwrap();
        assert_eq!(&r2[..5], &[0.50; 5]);
        assert_eq!(&r2[5..], &[0.75; 5]);
        let r0 = assign_ranks(10, &RankSpec::Rank(0)).unwrap();
        assert_eq!(r0.iter().filter(|&&r| r == 0.0).count(), 5);
        let explicit = assign_ranks(3, &RankSpec::Explicit(vec![0.0, 0.0, 0.0])).unwrap();
        assert_eq!(explicit, vec![0.0; 3]);
        assert!(assign_ranks(8, &RankSpec::Rank(2)).is_err());
        assert!(assign_ranks(2, &RankSpec::Explicit(vec![0.5])).is_err());
    }

    #[test]
    fn mask_enumeration_counts_combinations() {
        let arch = Architecture::new(
            FeatureShape::Flat(3),
            vec![
                LayerSpec::Dense {
                    in_dim: 3,
                    out_dim: 5,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    in_dim: 5,
                    out_dim: 2,
                    activation: Activation::Identity,
                },
            ],
        )
        .unwrap();
        let map = build_group_map(&arch).unwrap();
        let masks = enumerate_group_masks(&map, 2);
        assert_eq!(masks.len(), 10); // C(5, 2)
        for (combo, mask) in &masks {
            assert_eq!(combo.len(), 2);
            assert!(mask.achieved_ratio_num > 0);
        }
    }
}
