use crate::error::{AlgmError, Result};
use crate::exec;
use crate::numkernel::{cosine_rows_f64, mean_rows, row_norms, Matrix, Rng};
use crate::vit::{TokenSet, Window};

use super::{MergeEvent, MergeOp, MergeOutcome, MergeSite};

/// Conditional local average pooling parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClapParams {
    pub window: Window,
    /// A window merges when its mean pairwise similarity is strictly above `tau`.
    pub tau: f32,
    pub op: MergeOp,
    /// Layer recorded in the merge history.
    pub layer: usize,
    /// Merge at most this many windows, most similar first.
    pub max_windows: Option<usize>,
}

impl ClapParams {
    pub fn new(window: Window, tau: f32, op: MergeOp) -> Self {
        ClapParams { window, tau, op, layer: 1, max_windows: None }
    }
}

/// Raster indices of every window, windows in scan order and members in
/// raster order.
pub fn window_members(grid_h: usize, grid_w: usize, window: Window) -> Result<Vec<Vec<usize>>> {
    if window.h == 0 || window.w == 0 || grid_h % window.h != 0 || grid_w % window.w != 0 {
        return Err(AlgmError::Shape(format!(
            "window {window} does not tile the {grid_h}x{grid_w} token grid"
        )));
    }
    let mut out = Vec::with_capacity((grid_h / window.h) * (grid_w / window.w));
    for wy in 0..grid_h / window.h {
        for wx in 0..grid_w / window.w {
            let mut m = Vec::with_capacity(window.area());
            for dy in 0..window.h {
                for dx in 0..window.w {
                    m.push((wy * window.h + dy) * grid_w + wx * window.w + dx);
                }
            }
            out.push(m);
        }
    }
    Ok(out)
}

/// Mean cosine similarity over all unordered member pairs of each window.
///
/// Windows with fewer than two members score `None` and never merge.
pub fn window_scores(tokens: &Matrix, windows: &[Vec<usize>]) -> Vec<Option<f64>> {
    let norms = row_norms(tokens);
    exec::map_slice(windows, |m| {
        if m.len() < 2 {
            return None;
        }
        let mut sum = 0.0f64;
        let mut pairs = 0usize;
        for (x, &i) in m.iter().enumerate() {
            for &j in &m[x + 1..] {
                sum += cosine_rows_f64(tokens, &norms, i, j);
                pairs += 1;
            }
        }
        Some(sum / pairs as f64)
    })
}

fn check_full_resolution(ts: &TokenSet) -> Result<()> {
    let n = ts.grid_h * ts.grid_w;
    if ts.tokens.rows() != n || ts.cluster_sizes.iter().any(|&s| s != 1) {
        return Err(AlgmError::Precondition(format!(
            "local merging needs the full {}x{} grid with unit cluster sizes, got {} tokens",
            ts.grid_h,
            ts.grid_w,
            ts.tokens.rows()
        )));
    }
    Ok(())
}

fn selected_windows(scores: &[Option<f64>], tau: f32, limit: Option<usize>) -> Vec<usize> {
    let tau = tau as f64;
    let mut sel: Vec<usize> = (0..scores.len()).filter(|&w| scores[w].is_some_and(|mu| mu > tau)).collect();
    if let Some(limit) = limit {
        if sel.len() > limit {
            sel.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            sel.truncate(limit);
            sel.sort_unstable();
        }
    }
    sel
}

/// Number of windows whose mean similarity exceeds `params.tau`.
pub fn clap_candidates(ts: &TokenSet, params: &ClapParams) -> Result<usize> {
    check_full_resolution(ts)?;
    let windows = window_members(ts.grid_h, ts.grid_w, params.window)?;
    let scores = window_scores(&ts.tokens, &windows);
    Ok(selected_windows(&scores, params.tau, None).len())
}

/// Collapses each window whose mean pairwise similarity exceeds `tau`.
///
/// Output tokens keep original raster order; a merged window sits at the
/// position of its first (top-left) member.
pub fn clap_merge(ts: &TokenSet, params: &ClapParams, rng: &mut Rng) -> Result<MergeOutcome> {
    check_full_resolution(ts)?;
    let windows = window_members(ts.grid_h, ts.grid_w, params.window)?;
    let scores = window_scores(&ts.tokens, &windows);
    let selected = selected_windows(&scores, params.tau, params.max_windows);
    let n = ts.tokens.rows();
    let d = ts.tokens.cols();

    let values: Vec<Vec<f32>> = selected
        .iter()
        .map(|&w| {
            let m = &windows[w];
            match params.op {
                MergeOp::Average | MergeOp::Replicate => mean_rows(&ts.tokens, m),
                MergeOp::RandomPick => ts.tokens.row(m[rng.below(m.len())]).to_vec(),
            }
        })
        .collect();

    if params.op == MergeOp::Replicate {
        let mut tokens = ts.tokens.clone();
        let mut events = Vec::with_capacity(selected.len());
        for (&w, v) in selected.iter().zip(&values) {
            for &i in &windows[w] {
                tokens.row_mut(i).copy_from_slice(v);
            }
            let members = windows[w].clone();
            events.push(MergeEvent { site: MergeSite::Clap, layer: params.layer, survivor: members[0], members });
        }
        let step = (0..n).collect();
        return Ok(MergeOutcome::assemble(ts, tokens, ts.cluster_sizes.clone(), step, selected.len(), events));
    }

    // Map each token to its merged window (slot into `values`), if any.
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (slot, &w) in selected.iter().enumerate() {
        for &i in &windows[w] {
            owner[i] = Some(slot);
        }
    }
    let mut step = vec![usize::MAX; n];
    let mut out_of_slot = vec![usize::MAX; selected.len()];
    let mut data = Vec::with_capacity(n * d);
    let mut sizes = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(selected.len());
    let mut next = 0usize;
    for i in 0..n {
        match owner[i] {
            None => {
                data.extend_from_slice(ts.tokens.row(i));
                sizes.push(ts.cluster_sizes[i]);
                step[i] = next;
                next += 1;
            }
            Some(slot) if out_of_slot[slot] == usize::MAX => {
                // First member in raster order is the window's top-left token.
                let members = &windows[selected[slot]];
                data.extend_from_slice(&values[slot]);
                sizes.push(members.iter().map(|&m| ts.cluster_sizes[m]).sum());
                out_of_slot[slot] = next;
                step[i] = next;
                events.push(MergeEvent {
                    site: MergeSite::Clap,
                    layer: params.layer,
                    survivor: next,
                    members: members.clone(),
                });
                next += 1;
            }
            Some(slot) => step[i] = out_of_slot[slot],
        }
    }
    let tokens = Matrix::new(next, d, data)?;
    Ok(MergeOutcome::assemble(ts, tokens, sizes, step, selected.len(), events))
}
