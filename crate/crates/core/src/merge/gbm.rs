use crate::error::Result;
use crate::exec;
use crate::numkernel::{cosine_rows_f64, row_norms, weighted_mean_rows, Matrix, Rng};
use crate::vit::TokenSet;

use super::{MergeEvent, MergeOp, MergeOutcome, MergeSite};

/// Global bipartite merging parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GbmParams {
    /// An edge is kept when its similarity is strictly above `tau`.
    pub tau: f32,
    pub op: MergeOp,
    /// Weight the merged mean by cluster size, so it equals the mean of all
    /// original constituents.
    pub size_weighted: bool,
    pub layer: usize,
    /// Merge at most this many A-tokens, most similar edges first.
    pub max_merges: Option<usize>,
}

impl GbmParams {
    pub fn new(tau: f32, op: MergeOp) -> Self {
        GbmParams { tau, op, size_weighted: true, layer: 0, max_merges: None }
    }
}

/// Best B partner of one A token. Positions index the current token order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestEdge {
    pub a: usize,
    pub b: usize,
    pub sim: f64,
}

/// For each A token (even positions) its most similar B token (odd
/// positions); ties go to the lowest B position.
///
/// With an odd count the last token has no partner and is left out of A, so
/// `|A| = |B| = ⌊n/2⌋`.
pub fn gbm_best_edges(tokens: &Matrix) -> Vec<BestEdge> {
    let pairs = tokens.rows() / 2;
    let norms = row_norms(tokens);
    exec::map_range(pairs, |i| {
        let a = 2 * i;
        let mut best = BestEdge { a, b: 1, sim: cosine_rows_f64(tokens, &norms, a, 1) };
        for j in 1..pairs {
            let b = 2 * j + 1;
            let s = cosine_rows_f64(tokens, &norms, a, b);
            if s > best.sim {
                best = BestEdge { a, b, sim: s };
            }
        }
        best
    })
}

/// Best edges above `tau`, optionally capped to the `limit` strongest
/// (ties by lower A position). Returned in ascending A order.
pub fn gbm_select(tokens: &Matrix, tau: f32, limit: Option<usize>) -> Vec<BestEdge> {
    let mut edges: Vec<BestEdge> = gbm_best_edges(tokens).into_iter().filter(|e| e.sim > tau as f64).collect();
    if let Some(limit) = limit {
        if edges.len() > limit {
            edges.sort_by(|x, y| y.sim.partial_cmp(&x.sim).unwrap().then(x.a.cmp(&y.a)));
            edges.truncate(limit);
            edges.sort_by_key(|e| e.a);
        }
    }
    edges
}

/// Number of A tokens whose best edge exceeds `tau`.
pub fn gbm_candidates(ts: &TokenSet, tau: f32) -> usize {
    if ts.len() < 2 {
        return 0;
    }
    gbm_select(&ts.tokens, tau, None).len()
}

/// Merges every A token whose best B partner is more similar than `tau`.
///
/// Several A tokens may join the same B token. Survivors keep their relative
/// order: B tokens stay in place and merged A tokens disappear.
pub fn gbm_merge(ts: &TokenSet, params: &GbmParams, rng: &mut Rng) -> Result<MergeOutcome> {
    let n = ts.len();
    if n < 2 {
        return Ok(MergeOutcome::unchanged(ts));
    }
    let edges = gbm_select(&ts.tokens, params.tau, params.max_merges);
    if edges.is_empty() {
        return Ok(MergeOutcome::unchanged(ts));
    }

    // Groups keyed by B position: the B token followed by its absorbed A tokens.
    let mut absorbed_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &edges {
        absorbed_by[e.b].push(e.a);
    }
    let groups: Vec<(usize, Vec<usize>)> = (0..n)
        .filter(|&b| !absorbed_by[b].is_empty())
        .map(|b| {
            let mut members = absorbed_by[b].clone();
            members.push(b);
            members.sort_unstable();
            (b, members)
        })
        .collect();

    let weight = |i: usize| if params.size_weighted { ts.cluster_sizes[i] as f64 } else { 1.0 };
    let values: Vec<Vec<f32>> = groups
        .iter()
        .map(|(_, members)| match params.op {
            MergeOp::Average | MergeOp::Replicate => {
                weighted_mean_rows(&ts.tokens, members.iter().map(|&i| (i, weight(i))))
            }
            MergeOp::RandomPick => ts.tokens.row(members[rng.below(members.len())]).to_vec(),
        })
        .collect();

    if params.op == MergeOp::Replicate {
        let mut tokens = ts.tokens.clone();
        let mut events = Vec::with_capacity(groups.len());
        for ((b, members), v) in groups.iter().zip(&values) {
            for &i in members {
                tokens.row_mut(i).copy_from_slice(v);
            }
            events.push(MergeEvent { site: MergeSite::Gbm, layer: params.layer, survivor: *b, members: members.clone() });
        }
        let step = (0..n).collect();
        return Ok(MergeOutcome::assemble(ts, tokens, ts.cluster_sizes.clone(), step, edges.len(), events));
    }

    let mut merged_into: Vec<Option<usize>> = vec![None; n];
    for e in &edges {
        merged_into[e.a] = Some(e.b);
    }
    let mut group_of: Vec<Option<usize>> = vec![None; n];
    for (g, (b, _)) in groups.iter().enumerate() {
        group_of[*b] = Some(g);
    }

    let d = ts.tokens.cols();
    let mut step = vec![usize::MAX; n];
    let mut data = Vec::with_capacity((n - edges.len()) * d);
    let mut sizes = Vec::with_capacity(n - edges.len());
    let mut next = 0usize;
    for i in 0..n {
        if merged_into[i].is_some() {
            continue;
        }
        step[i] = next;
        match group_of[i] {
            Some(g) => {
                data.extend_from_slice(&values[g]);
                sizes.push(groups[g].1.iter().map(|&m| ts.cluster_sizes[m]).sum());
            }
            None => {
                data.extend_from_slice(ts.tokens.row(i));
                sizes.push(ts.cluster_sizes[i]);
            }
        }
        next += 1;
    }
    for i in 0..n {
        if let Some(b) = merged_into[i] {
            step[i] = step[b];
        }
    }
    let events = groups
        .into_iter()
        .map(|(b, members)| MergeEvent { site: MergeSite::Gbm, layer: params.layer, survivor: step[b], members })
        .collect();
    let tokens = Matrix::new(next, d, data)?;
    Ok(MergeOutcome::assemble(ts, tokens, sizes, step, edges.len(), events))
}
