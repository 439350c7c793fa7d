//! Worker assignments for Stream-K, data-parallel and split-K
//! decompositions, plus the wave-quantization and makespan models.
//!
//! Every strategy is expressed the same way: each worker owns a half-open
//! range of global MAC iterations, where global iteration
//! `tile_id * k_iters + local` is the `local`-th `bk` slice of `tile_id`.
//! The ranges are then projected onto tiles as [`TileFragment`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MachineModel, TileGrid};

/// The part of one tile's MAC loop that a single worker computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileFragment {
    pub tile_id: usize,
    /// Local iteration range `[k_begin, k_end)` within the tile.
    pub k_begin: usize,
    pub k_end: usize,
    /// Set when the fragment holds the tile's first iteration. The owner
    /// combines every partial for the tile and writes the output.
    pub is_owner: bool,
}

impl TileFragment {
    pub fn len(&self) -> usize {
        self.k_end - self.k_begin
    }

    pub fn is_empty(&self) -> bool {
        self.k_end == self.k_begin
    }

    pub fn global_begin(&self, grid: &TileGrid) -> usize {
        self.tile_id * grid.k_iters + self.k_begin
    }

    pub fn global_end(&self, grid: &TileGrid) -> usize {
        self.tile_id * grid.k_iters + self.k_end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerPlan {
    pub worker_id: usize,
    pub iter_begin: usize,
    pub iter_end: usize,
    pub fragments: Vec<TileFragment>,
}

impl WorkerPlan {
    pub fn len(&self) -> usize {
        self.iter_end - self.iter_begin
    }

    pub fn is_empty(&self) -> bool {
        self.iter_end == self.iter_begin
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecompositionKind {
    DataParallel,
    SplitK(usize),
    StreamK,
}

impl std::fmt::Display for DecompositionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecompositionKind::DataParallel => write!(f, "data-parallel"),
            DecompositionKind::SplitK(s) => write!(f, "split-k({s})"),
            DecompositionKind::StreamK => write!(f, "stream-k"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub kind: DecompositionKind,
    /// Grid size: the number of workers, empty ones included.
    pub g: usize,
    pub plans: Vec<WorkerPlan>,
    pub grid: TileGrid,
}

impl Decomposition {
    /// Workers with at least one iteration.
    pub fn active_workers(&self) -> usize {
        self.plans.iter().filter(|p| !p.is_empty()).count()
    }

    pub fn fragments(&self) -> impl Iterator<Item = (usize, &TileFragment)> {
        self.plans
            .iter()
            .flat_map(|p| p.fragments.iter().map(move |f| (p.worker_id, f)))
    }

    /// Number of tiles whose iterations are split across two or more workers.
    pub fn shared_tiles(&self) -> usize {
        let mut shared = vec![false; self.grid.total_tiles];
        for (_, frag) in self.fragments() {
            if !frag.is_owner {
                shared[frag.tile_id] = true;
            }
        }
        shared.into_iter().filter(|&s| s).count()
    }

    /// Checks the structural invariants every strategy must satisfy: plans in
    /// worker order partitioning `[0, total_iters)`, fragments tiling each
    /// range, and exactly one owner per tile.
    pub fn validate(&self) -> Result<()> {
        let grid = &self.grid;
        if self.plans.len() != self.g {
            return Err(Error::PlanMismatch(format!(
                "{} plans for grid size {}",
                self.plans.len(),
                self.g
            )));
        }
        let mut cursor = 0;
        let mut owners = vec![0usize; grid.total_tiles];
        for (w, plan) in self.plans.iter().enumerate() {
            if plan.worker_id != w || plan.iter_begin != cursor || plan.iter_end < plan.iter_begin {
                return Err(Error::PlanMismatch(format!(
                    "worker {w} range [{}, {}) does not continue at {cursor}",
                    plan.iter_begin, plan.iter_end
                )));
            }
            let mut at = plan.iter_begin;
            for frag in &plan.fragments {
                if frag.tile_id >= grid.total_tiles
                    || frag.k_end > grid.k_iters
                    || frag.is_empty()
                    || frag.is_owner != (frag.k_begin == 0)
                    || frag.global_begin(grid) != at
                {
                    return Err(Error::PlanMismatch(format!(
                        "worker {w} has malformed fragment {frag:?}"
                    )));
                }
                if frag.is_owner {
                    owners[frag.tile_id] += 1;
                }
                at = frag.global_end(grid);
            }
            if at != plan.iter_end {
                return Err(Error::PlanMismatch(format!(
                    "worker {w} fragments end at {at}, range ends at {}",
                    plan.iter_end
                )));
            }
            cursor = plan.iter_end;
        }
        if cursor != grid.total_iters {
            return Err(Error::PlanMismatch(format!(
                "plans cover [0, {cursor}) of {} iterations",
                grid.total_iters
            )));
        }
        if let Some(tile) = owners.iter().position(|&o| o != 1) {
            return Err(Error::PlanMismatch(format!(
                "tile {tile} has {} owners",
                owners[tile]
            )));
        }
        Ok(())
    }
}

/// `floor(w * total / parts)`, the boundary rule shared by Stream-K and split-K.
fn boundary(w: usize, total: usize, parts: usize) -> usize {
    (w as u128 * total as u128 / parts as u128) as usize
}

/// Projects the global range `[iter_begin, iter_end)` onto tile fragments.
pub fn fragments_for_range(
    iter_begin: usize,
    iter_end: usize,
    grid: &TileGrid,
) -> Result<Vec<TileFragment>> {
    if iter_begin > iter_end || iter_end > grid.total_iters {
        return Err(Error::invalid(
            "iteration range",
            format!(
                "[{iter_begin}, {iter_end}) is not within [0, {})",
                grid.total_iters
            ),
        ));
    }
    let mut fragments = Vec::new();
    let mut at = iter_begin;
    while at < iter_end {
        let tile_id = at / grid.k_iters;
        let k_begin = at % grid.k_iters;
        let k_end = grid.k_iters.min(k_begin + (iter_end - at));
        fragments.push(TileFragment {
            tile_id,
            k_begin,
            k_end,
            is_owner: k_begin == 0,
        });
        at += k_end - k_begin;
    }
    Ok(fragments)
}

fn plan_for_range(worker_id: usize, begin: usize, end: usize, grid: &TileGrid) -> WorkerPlan {
    WorkerPlan {
        worker_id,
        iter_begin: begin,
        iter_end: end,
        fragments: fragments_for_range(begin, end, grid)
            .expect("range derived from the boundary rule lies within the grid"),
    }
}

/// Splits the whole MAC-iteration space evenly over `g` workers, ignoring
/// tile boundaries. Range lengths differ by at most one.
pub fn partition_streamk(grid: &TileGrid, g: usize) -> Result<Decomposition> {
    if g == 0 {
        return Err(Error::invalid("g", "grid size must be at least 1"));
    }
    let total = grid.total_iters;
    let plans = (0..g)
        .map(|w| plan_for_range(w, boundary(w, total, g), boundary(w + 1, total, g), grid))
        .collect();
    Ok(Decomposition {
        kind: DecompositionKind::StreamK,
        g,
        plans,
        grid: *grid,
    })
}

/// One worker per output tile, each running the tile's full MAC loop.
pub fn partition_data_parallel(grid: &TileGrid) -> Decomposition {
    let k = grid.k_iters;
    let plans = (0..grid.total_tiles)
        .map(|t| plan_for_range(t, t * k, (t + 1) * k, grid))
        .collect();
    Decomposition {
        kind: DecompositionKind::DataParallel,
        g: grid.total_tiles,
        plans,
        grid: *grid,
    }
}

/// Every tile's MAC loop cut into `splits` near-even contiguous pieces, one
/// worker per piece.
pub fn partition_split_k(grid: &TileGrid, splits: usize) -> Result<Decomposition> {
    if splits == 0 || splits > grid.k_iters {
        return Err(Error::invalid(
            "splits",
            format!("must be in 1..={} (k_iters), got {splits}", grid.k_iters),
        ));
    }
    let k = grid.k_iters;
    let mut plans = Vec::with_capacity(grid.total_tiles * splits);
    for t in 0..grid.total_tiles {
        for s in 0..splits {
            let begin = t * k + boundary(s, k, splits);
            let end = t * k + boundary(s + 1, k, splits);
            plans.push(plan_for_range(plans.len(), begin, end, grid));
        }
    }
    Ok(Decomposition {
        kind: DecompositionKind::SplitK(splits),
        g: plans.len(),
        plans,
        grid: *grid,
    })
}

/// Builds the decomposition for `kind`. `g` is only consulted for Stream-K.
pub fn partition(grid: &TileGrid, kind: DecompositionKind, g: usize) -> Result<Decomposition> {
    match kind {
        DecompositionKind::DataParallel => Ok(partition_data_parallel(grid)),
        DecompositionKind::SplitK(s) => partition_split_k(grid, s),
        DecompositionKind::StreamK => partition_streamk(grid, g),
    }
}

/// Best-case processor utilization of a tile-per-worker schedule:
/// `T / (ceil(T / p) * p)`.
pub fn quantization_utilization(total_tiles: usize, machine: &MachineModel) -> f64 {
    let p = machine.p;
    let waves = total_tiles.div_ceil(p);
    total_tiles as f64 / (waves * p) as f64
}

/// Tiles containing an interior Stream-K range boundary.
fn streamk_shared_tiles(grid: &TileGrid, g: usize) -> usize {
    let total = grid.total_iters;
    let mut count = 0;
    let mut last = None;
    for w in 1..g {
        let b = boundary(w, total, g);
        if b == 0 || b >= total || b.is_multiple_of(grid.k_iters) {
            continue;
        }
        let tile = b / grid.k_iters;
        if last != Some(tile) {
            count += 1;
            last = Some(tile);
        }
    }
    count
}

/// Completion time in MAC-iteration units.
///
/// Workers run in waves of `p`. Data-parallel takes `ceil(T/p)` waves of
/// `k_iters`; Stream-K with `g <= p` takes `ceil(total_iters/g)`. Every tile
/// split across workers adds `fixup_cost`. Split-K and Stream-K with `g > p`
/// follow the same wave rule over their non-empty workers.
pub fn makespan_model(
    grid: &TileGrid,
    kind: DecompositionKind,
    g: usize,
    machine: &MachineModel,
    fixup_cost: f64,
) -> Result<f64> {
    if fixup_cost.is_nan() || fixup_cost < 0.0 {
        return Err(Error::invalid("fixup_cost", "must be non-negative"));
    }
    let p = machine.p;
    let (waves, per_worker, shared) = match kind {
        DecompositionKind::DataParallel => (grid.total_tiles.div_ceil(p), grid.k_iters, 0),
        DecompositionKind::SplitK(s) => {
            if s == 0 || s > grid.k_iters {
                return Err(Error::invalid("splits", "must be in 1..=k_iters"));
            }
            let shared = if s > 1 { grid.total_tiles } else { 0 };
            (
                (grid.total_tiles * s).div_ceil(p),
                grid.k_iters.div_ceil(s),
                shared,
            )
        }
        DecompositionKind::StreamK => {
            if g == 0 {
                return Err(Error::invalid("g", "grid size must be at least 1"));
            }
            let active = g.min(grid.total_iters);
            (
                active.div_ceil(p),
                grid.total_iters.div_ceil(active),
                streamk_shared_tiles(grid, g),
            )
        }
    };
    Ok((waves * per_worker) as f64 + fixup_cost * shared as f64)
}

/// Share of processor-time spent on MAC iterations under the makespan model
/// with free fixups. Equals [`quantization_utilization`] for data-parallel.
pub fn modeled_utilization(
    grid: &TileGrid,
    kind: DecompositionKind,
    g: usize,
    machine: &MachineModel,
) -> Result<f64> {
    let makespan = makespan_model(grid, kind, g, machine, 0.0)?;
    Ok(grid.total_iters as f64 / (machine.p as f64 * makespan))
}
