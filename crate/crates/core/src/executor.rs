//! Runs a [`Decomposition`] against real matrices.
//!
//! Each worker walks its fragments in order and accumulates the partial
//! product of every fragment's k-slice. A fragment that does not start at
//! its tile's first iteration deposits its partial into the
//! [`FixupWorkspace`] and bumps the tile's arrival counter. The owner waits
//! for the counter to reach the number of non-owner fragments, folds the
//! partials into its own in ascending `k_begin` order, applies
//! `alpha`/`beta`, and emits the finished tile.
//!
//! The fixed combine order makes the floating-point result independent of
//! worker scheduling, so both execution modes produce identical bits.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decompose::{partition, Decomposition, DecompositionKind, TileFragment};
use crate::error::{Error, Result};
use crate::model::{padded_shape, tile_grid, ProblemShape, TileConfig, TileGrid};

/// Below this magnitude a reference element is treated as this value when
/// computing relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-30;

/// Value domain of a matrix.
///
/// `ExactInt` holds small integers in `f32` storage so that every product
/// and partial sum is exactly representable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarKind {
    ExactInt,
    Real32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecMode {
    /// All workers interleaved on the calling thread, one fragment per turn.
    DeterministicSim,
    /// One OS thread per worker.
    Concurrent,
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixBuffer {
    pub rows: usize,
    pub cols: usize,
    pub elements: Vec<f32>,
    pub scalar_kind: ScalarKind,
}

impl MatrixBuffer {
    pub fn new(
        rows: usize,
        cols: usize,
        elements: Vec<f32>,
        scalar_kind: ScalarKind,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(format!(
                "matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if elements.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} elements for a {rows}x{cols} matrix",
                elements.len()
            )));
        }
        Ok(MatrixBuffer {
            rows,
            cols,
            elements,
            scalar_kind,
        })
    }

    pub fn zeros(rows: usize, cols: usize, scalar_kind: ScalarKind) -> Self {
        MatrixBuffer {
            rows,
            cols,
            elements: vec![0.0; rows * cols],
            scalar_kind,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.elements[row * self.cols + col]
    }

    fn row(&self, row: usize) -> &[f32] {
        &self.elements[row * self.cols..(row + 1) * self.cols]
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &MatrixBuffer) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .elements
                .iter()
                .zip(&other.elements)
                .all(|(x, y)| x.to_bits() == y.to_bits())
    }

    fn check_dims(&self, name: &str, rows: usize, cols: usize) -> Result<()> {
        if self.rows != rows || self.cols != cols {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {}x{}, expected {rows}x{cols}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Seeded operands: integers uniform in `[-8, 8]` for `ExactInt`, reals
/// uniform in `[-1, 1]` for `Real32`. A is drawn before B from one stream.
pub fn generate_matrices(
    shape: &ProblemShape,
    scalar_kind: ScalarKind,
    seed: u64,
) -> (MatrixBuffer, MatrixBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |len: usize| -> Vec<f32> {
        match scalar_kind {
            ScalarKind::ExactInt => (0..len).map(|_| rng.gen_range(-8i32..=8) as f32).collect(),
            ScalarKind::Real32 => (0..len).map(|_| rng.gen_range(-1.0f32..=1.0)).collect(),
        }
    };
    let a = draw(shape.m * shape.k);
    let b = draw(shape.k * shape.n);
    (
        MatrixBuffer {
            rows: shape.m,
            cols: shape.k,
            elements: a,
            scalar_kind,
        },
        MatrixBuffer {
            rows: shape.k,
            cols: shape.n,
            elements: b,
            scalar_kind,
        },
    )
}

fn check_operands(
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    c_in: Option<&MatrixBuffer>,
    shape: &ProblemShape,
) -> Result<()> {
    shape.validate()?;
    a.check_dims("A", shape.m, shape.k)?;
    b.check_dims("B", shape.k, shape.n)?;
    if let Some(c) = c_in {
        c.check_dims("C", shape.m, shape.n)?;
    }
    Ok(())
}

#[inline]
fn epilogue(acc: f64, c_in: f32, shape: &ProblemShape) -> f32 {
    let mut out = shape.alpha * acc;
    if shape.beta != 0.0 {
        out += shape.beta * c_in as f64;
    }
    out as f32
}

/// Reference GEMM: `C = alpha * A * B`, summed over ascending `l` in `f64`.
pub fn gemm_oracle(
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    shape: &ProblemShape,
) -> Result<MatrixBuffer> {
    gemm_oracle_with_c(a, b, None, shape)
}

/// Reference GEMM with an input C: `C = alpha * A * B + beta * C_in`.
pub fn gemm_oracle_with_c(
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    c_in: Option<&MatrixBuffer>,
    shape: &ProblemShape,
) -> Result<MatrixBuffer> {
    check_operands(a, b, c_in, shape)?;
    let (m, n, k) = (shape.m, shape.n, shape.k);
    let mut c = MatrixBuffer::zeros(m, n, a.scalar_kind);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.fill(0.0);
        let a_row = a.row(i);
        // l-outer keeps each C[i][j] summed in ascending l.
        for (l, &a_il) in a_row.iter().enumerate().take(k) {
            let a_il = a_il as f64;
            for (acc_j, &b_lj) in acc.iter_mut().zip(b.row(l)) {
                *acc_j += a_il * b_lj as f64;
            }
        }
        for (j, &acc_j) in acc.iter().enumerate() {
            let prior = c_in.map_or(0.0, |c| c.get(i, j));
            c.elements[i * n + j] = epilogue(acc_j, prior, shape);
        }
    }
    Ok(c)
}

/// Per-element comparison summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Fraction of elements whose relative error exceeds the tolerance.
    pub pct_mismatch: f64,
    pub mismatches: usize,
    pub elements: usize,
}

impl ErrorReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0
    }
}

pub fn verify(c: &MatrixBuffer, c_ref: &MatrixBuffer, rel_tol: f64) -> Result<ErrorReport> {
    c.check_dims("result", c_ref.rows, c_ref.cols)?;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut mismatches = 0;
    for (&x, &r) in c.elements.iter().zip(&c_ref.elements) {
        let (x, r) = (x as f64, r as f64);
        let abs = (x - r).abs();
        let rel = abs / r.abs().max(REL_ERROR_FLOOR);
        if rel.is_nan() || rel > rel_tol {
            mismatches += 1;
        }
        if abs.is_nan() || abs > max_abs {
            max_abs = if abs.is_nan() { f64::INFINITY } else { abs };
        }
        if rel.is_nan() || rel > max_rel {
            max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
        }
    }
    let elements = c.elements.len();
    Ok(ErrorReport {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        pct_mismatch: mismatches as f64 / elements as f64,
        mismatches,
        elements,
    })
}

/// Cross-worker partial-sum storage and per-tile arrival counters.
///
/// Slots for one tile are contiguous and sorted by `k_begin`, which is the
/// order the owner folds them in.
pub struct FixupWorkspace {
    slots: Vec<Mutex<Option<Vec<f64>>>>,
    slot_k_begin: Vec<usize>,
    /// `tile_slots[t]..tile_slots[t + 1]` are tile `t`'s slots.
    tile_slots: Vec<usize>,
    arrivals: Vec<AtomicUsize>,
}

impl FixupWorkspace {
    pub fn new(decomp: &Decomposition) -> Self {
        let tiles = decomp.grid.total_tiles;
        let mut per_tile: Vec<Vec<usize>> = vec![Vec::new(); tiles];
        for (_, frag) in decomp.fragments() {
            if !frag.is_owner {
                per_tile[frag.tile_id].push(frag.k_begin);
            }
        }
        let mut slot_k_begin = Vec::new();
        let mut tile_slots = Vec::with_capacity(tiles + 1);
        tile_slots.push(0);
        for mut ks in per_tile {
            ks.sort_unstable();
            slot_k_begin.extend(ks);
            tile_slots.push(slot_k_begin.len());
        }
        FixupWorkspace {
            slots: (0..slot_k_begin.len()).map(|_| Mutex::new(None)).collect(),
            slot_k_begin,
            tile_slots,
            arrivals: (0..tiles).map(|_| AtomicUsize::new(0)).collect(),
        }
    }

    /// Non-owner fragments the owner of `tile` must wait for.
    pub fn expected(&self, tile: usize) -> usize {
        self.tile_slots[tile + 1] - self.tile_slots[tile]
    }

    pub fn arrived(&self, tile: usize) -> usize {
        self.arrivals[tile].load(Ordering::Acquire)
    }

    pub fn is_ready(&self, tile: usize) -> bool {
        self.arrived(tile) == self.expected(tile)
    }

    fn slot(&self, tile: usize, k_begin: usize) -> Result<usize> {
        let range = self.tile_slots[tile]..self.tile_slots[tile + 1];
        let local = self.slot_k_begin[range.clone()]
            .binary_search(&k_begin)
            .map_err(|_| {
                Error::Protocol(format!(
                    "tile {tile} has no fixup slot for k_begin {k_begin}"
                ))
            })?;
        Ok(range.start + local)
    }

    /// Stores a non-owner partial, then signals its arrival.
    pub fn deposit(&self, tile: usize, k_begin: usize, partial: Vec<f64>) -> Result<()> {
        let slot = self.slot(tile, k_begin)?;
        {
            let mut guard = self.slots[slot].lock().expect("fixup slot poisoned");
            if guard.is_some() {
                return Err(Error::Protocol(format!(
                    "tile {tile} partial at k_begin {k_begin} deposited twice"
                )));
            }
            *guard = Some(partial);
        }
        self.arrivals[tile].fetch_add(1, Ordering::Release);
        Ok(())
    }

    /// Adds every deposited partial of `tile` into `acc` in ascending
    /// `k_begin` order and returns the `k_begin`s consumed. Each partial can
    /// be consumed once.
    pub fn combine_into(&self, tile: usize, acc: &mut [f64]) -> Result<Vec<usize>> {
        let arrived = self.arrived(tile);
        let expected = self.expected(tile);
        if arrived != expected {
            return Err(Error::Protocol(format!(
                "tile {tile} combined with {arrived} of {expected} partials signaled"
            )));
        }
        let mut consumed = Vec::with_capacity(expected);
        for slot in self.tile_slots[tile]..self.tile_slots[tile + 1] {
            let partial = self.slots[slot]
                .lock()
                .expect("fixup slot poisoned")
                .take()
                .ok_or_else(|| {
                    Error::Protocol(format!(
                        "tile {tile} partial at k_begin {} missing at combine",
                        self.slot_k_begin[slot]
                    ))
                })?;
            if partial.len() != acc.len() {
                return Err(Error::Protocol(format!(
                    "tile {tile} partial has {} elements, accumulator {}",
                    partial.len(),
                    acc.len()
                )));
            }
            for (x, p) in acc.iter_mut().zip(&partial) {
                *x += p;
            }
            consumed.push(self.slot_k_begin[slot]);
        }
        Ok(consumed)
    }

    /// Every counter at its expected value and every partial consumed.
    pub fn check_drained(&self) -> Result<()> {
        for tile in 0..self.arrivals.len() {
            if !self.is_ready(tile) {
                return Err(Error::Protocol(format!(
                    "tile {tile} finished with {} of {} arrivals",
                    self.arrived(tile),
                    self.expected(tile)
                )));
            }
        }
        for (slot, partial) in self.slots.iter().enumerate() {
            if partial.lock().expect("fixup slot poisoned").is_some() {
                return Err(Error::Protocol(format!(
                    "partial in slot {slot} was never combined"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    /// A fragment's partial product was computed.
    Compute {
        worker: usize,
        tile: usize,
        k_begin: usize,
        k_end: usize,
        macs: u64,
    },
    /// A non-owner partial was stored and its arrival signaled.
    Signal {
        worker: usize,
        tile: usize,
        k_begin: usize,
    },
    /// The owner read the listed non-owner partials and wrote the tile.
    Combine {
        worker: usize,
        tile: usize,
        partials: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub event: TraceEvent,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub kind: DecompositionKind,
    pub g: usize,
    pub mode: ExecMode,
    /// Events in global sequence order.
    pub events: Vec<TraceRecord>,
    pub worker_macs: Vec<u64>,
    pub empty_workers: usize,
    /// Scalar MACs executed, padded zeros included.
    pub work_macs: u128,
    pub elapsed: Duration,
}

impl ExecutionTrace {
    /// Tiles whose final value was assembled from more than one worker.
    pub fn shared_tiles(&self) -> usize {
        self.events
            .iter()
            .filter(|r| matches!(&r.event, TraceEvent::Combine { partials, .. } if !partials.is_empty()))
            .count()
    }

    /// Every partial read at combine time was signaled earlier in the trace.
    pub fn check_signal_order(&self) -> Result<()> {
        use std::collections::HashMap;
        let mut signaled: HashMap<(usize, usize), u64> = HashMap::new();
        for rec in &self.events {
            match &rec.event {
                TraceEvent::Signal { tile, k_begin, .. } => {
                    signaled.insert((*tile, *k_begin), rec.seq);
                }
                TraceEvent::Combine { tile, partials, .. } => {
                    for k in partials {
                        match signaled.get(&(*tile, *k)) {
                            Some(&seq) if seq < rec.seq => {}
                            _ => {
                                return Err(Error::Protocol(format!(
                                    "tile {tile} partial at k_begin {k} read before its signal"
                                )))
                            }
                        }
                    }
                }
                TraceEvent::Compute { .. } => {}
            }
        }
        Ok(())
    }

    /// Every MAC iteration of every tile was computed once and reached the
    /// tile's combine exactly once.
    pub fn check_conservation(&self, grid: &TileGrid) -> Result<()> {
        let mut covered = vec![0u32; grid.total_iters];
        let mut signaled = vec![Vec::new(); grid.total_tiles];
        let mut combined = vec![None; grid.total_tiles];
        for rec in &self.events {
            match &rec.event {
                TraceEvent::Compute {
                    tile,
                    k_begin,
                    k_end,
                    ..
                } => {
                    let base = tile * grid.k_iters;
                    for count in &mut covered[base + k_begin..base + k_end] {
                        *count += 1;
                    }
                }
                TraceEvent::Signal { tile, k_begin, .. } => signaled[*tile].push(*k_begin),
                TraceEvent::Combine { tile, partials, .. } => {
                    if combined[*tile].replace(partials.clone()).is_some() {
                        return Err(Error::Protocol(format!("tile {tile} combined twice")));
                    }
                }
            }
        }
        if let Some(it) = covered.iter().position(|&c| c != 1) {
            return Err(Error::Protocol(format!(
                "iteration {it} computed {} times",
                covered[it]
            )));
        }
        for (tile, (mut sig, comb)) in signaled.into_iter().zip(combined).enumerate() {
            sig.sort_unstable();
            match comb {
                Some(c) if c == sig => {}
                Some(c) => {
                    return Err(Error::Protocol(format!(
                        "tile {tile} combined partials {c:?} but {sig:?} were signaled"
                    )))
                }
                None => return Err(Error::Protocol(format!("tile {tile} never combined"))),
            }
        }
        Ok(())
    }
}

/// Geometry and operands shared by all workers of one execution.
struct Kernel<'a> {
    a: &'a MatrixBuffer,
    b: &'a MatrixBuffer,
    c_in: Option<&'a MatrixBuffer>,
    shape: ProblemShape,
    tiles: TileConfig,
    grid: TileGrid,
}

/// Extents of one output tile: `real` rows/cols land in C, `exec` rows/cols
/// are computed (they differ only on padded edge tiles).
struct TileExtent {
    row0: usize,
    col0: usize,
    rows_real: usize,
    cols_real: usize,
    rows_exec: usize,
    cols_exec: usize,
}

impl Kernel<'_> {
    fn extent(&self, tile: usize) -> TileExtent {
        let (tm, tn) = (tile / self.grid.tiles_n, tile % self.grid.tiles_n);
        let (row0, col0) = (tm * self.tiles.bm, tn * self.tiles.bn);
        let rows_real = self.tiles.bm.min(self.shape.m - row0);
        let cols_real = self.tiles.bn.min(self.shape.n - col0);
        TileExtent {
            row0,
            col0,
            rows_real,
            cols_real,
            rows_exec: if self.tiles.pad_m {
                self.tiles.bm
            } else {
                rows_real
            },
            cols_exec: if self.tiles.pad_n {
                self.tiles.bn
            } else {
                cols_real
            },
        }
    }

    /// Partial product of one fragment as a `rows_exec x cols_exec` block.
    /// Padded rows, columns and k-steps read as zero.
    fn compute(&self, frag: &TileFragment) -> (Vec<f64>, u64) {
        let ext = self.extent(frag.tile_id);
        let k0 = frag.k_begin * self.tiles.bk;
        let k1_exec = frag.k_end * self.tiles.bk;
        let k1_real = k1_exec.min(self.shape.k);
        let k1 = if self.tiles.pad_k { k1_exec } else { k1_real };
        let depth = k1 - k0;
        let depth_real = k1_real - k0;
        let (rows, cols) = (ext.rows_exec, ext.cols_exec);

        let mut a_pack = vec![0.0f64; rows * depth];
        for i in 0..ext.rows_real {
            let src = &self.a.row(ext.row0 + i)[k0..k1_real];
            for (dst, &x) in a_pack[i * depth..i * depth + depth_real]
                .iter_mut()
                .zip(src)
            {
                *dst = x as f64;
            }
        }
        let mut b_pack = vec![0.0f64; depth * cols];
        for l in 0..depth_real {
            let src = &self.b.row(k0 + l)[ext.col0..ext.col0 + ext.cols_real];
            for (dst, &x) in b_pack[l * cols..l * cols + ext.cols_real]
                .iter_mut()
                .zip(src)
            {
                *dst = x as f64;
            }
        }

        // Four output rows share each packed B row; every element is summed
        // over ascending l.
        let mut acc = vec![0.0f64; rows * cols];
        if cols > 0 && depth > 0 {
            let mut row_blocks = acc.chunks_exact_mut(cols * 4);
            let mut i = 0;
            for block in row_blocks.by_ref() {
                let (r0, rest) = block.split_at_mut(cols);
                let (r1, rest) = rest.split_at_mut(cols);
                let (r2, r3) = rest.split_at_mut(cols);
                for l in 0..depth {
                    let a0 = a_pack[i * depth + l];
                    let a1 = a_pack[(i + 1) * depth + l];
                    let a2 = a_pack[(i + 2) * depth + l];
                    let a3 = a_pack[(i + 3) * depth + l];
                    let b_row = &b_pack[l * cols..(l + 1) * cols];
                    for j in 0..cols {
                        let b = b_row[j];
                        r0[j] += a0 * b;
                        r1[j] += a1 * b;
                        r2[j] += a2 * b;
                        r3[j] += a3 * b;
                    }
                }
                i += 4;
            }
            for row in row_blocks.into_remainder().chunks_exact_mut(cols) {
                for l in 0..depth {
                    let a = a_pack[i * depth + l];
                    for (x, &b) in row.iter_mut().zip(&b_pack[l * cols..(l + 1) * cols]) {
                        *x += a * b;
                    }
                }
                i += 1;
            }
        }
        (acc, (rows * cols * depth) as u64)
    }

    /// Applies the epilogue to a combined accumulator, returning the tile's
    /// real rows and columns.
    fn finish(&self, tile: usize, acc: &[f64]) -> Vec<f32> {
        let ext = self.extent(tile);
        let mut out = Vec::with_capacity(ext.rows_real * ext.cols_real);
        for i in 0..ext.rows_real {
            for j in 0..ext.cols_real {
                let prior = self.c_in.map_or(0.0, |c| c.get(ext.row0 + i, ext.col0 + j));
                out.push(epilogue(acc[i * ext.cols_exec + j], prior, &self.shape));
            }
        }
        out
    }
}

enum Step {
    Progress,
    Blocked,
    Done,
}

/// One worker's position in its fragment list.
struct Worker<'a> {
    id: usize,
    fragments: &'a [TileFragment],
    next: usize,
    /// Owner partial waiting on its tile's arrival counter.
    pending: Option<(usize, Vec<f64>)>,
    events: Vec<TraceRecord>,
    outputs: Vec<(usize, Vec<f32>)>,
    macs: u64,
}

impl<'a> Worker<'a> {
    fn new(id: usize, fragments: &'a [TileFragment]) -> Self {
        Worker {
            id,
            fragments,
            next: 0,
            pending: None,
            events: Vec::new(),
            outputs: Vec::new(),
            macs: 0,
        }
    }

    fn record(&mut self, seq: &AtomicU64, event: TraceEvent) {
        let seq = seq.fetch_add(1, Ordering::SeqCst);
        self.events.push(TraceRecord { seq, event });
    }

    fn try_combine(
        &mut self,
        kernel: &Kernel<'_>,
        ws: &FixupWorkspace,
        seq: &AtomicU64,
    ) -> Result<Step> {
        let (tile, mut acc) = self.pending.take().expect("pending combine");
        if !ws.is_ready(tile) {
            self.pending = Some((tile, acc));
            return Ok(Step::Blocked);
        }
        let partials = ws.combine_into(tile, &mut acc)?;
        self.record(
            seq,
            TraceEvent::Combine {
                worker: self.id,
                tile,
                partials,
            },
        );
        self.outputs.push((tile, kernel.finish(tile, &acc)));
        Ok(Step::Progress)
    }

    /// Advances by at most one fragment.
    fn step(&mut self, kernel: &Kernel<'_>, ws: &FixupWorkspace, seq: &AtomicU64) -> Result<Step> {
        if self.pending.is_some() {
            return self.try_combine(kernel, ws, seq);
        }
        let Some(frag) = self.fragments.get(self.next).copied() else {
            return Ok(Step::Done);
        };
        self.next += 1;
        let (partial, macs) = kernel.compute(&frag);
        self.macs += macs;
        self.record(
            seq,
            TraceEvent::Compute {
                worker: self.id,
                tile: frag.tile_id,
                k_begin: frag.k_begin,
                k_end: frag.k_end,
                macs,
            },
        );
        if frag.is_owner {
            self.pending = Some((frag.tile_id, partial));
            match self.try_combine(kernel, ws, seq)? {
                Step::Blocked => Ok(Step::Progress),
                step => Ok(step),
            }
        } else {
            // The sequence number is taken before the release increment so
            // that any combine observing it gets a larger one.
            self.record(
                seq,
                TraceEvent::Signal {
                    worker: self.id,
                    tile: frag.tile_id,
                    k_begin: frag.k_begin,
                },
            );
            ws.deposit(frag.tile_id, frag.k_begin, partial)?;
            Ok(Step::Progress)
        }
    }

    fn is_finished(&self) -> bool {
        self.pending.is_none() && self.next == self.fragments.len()
    }
}

fn run_sim(
    workers: &mut [Worker<'_>],
    kernel: &Kernel<'_>,
    ws: &FixupWorkspace,
    seq: &AtomicU64,
) -> Result<()> {
    loop {
        let mut progressed = false;
        for w in workers.iter_mut() {
            if let Step::Progress = w.step(kernel, ws, seq)? {
                progressed = true;
            }
        }
        if workers.iter().all(Worker::is_finished) {
            return Ok(());
        }
        if !progressed {
            let stuck: Vec<_> = workers
                .iter()
                .filter_map(|w| w.pending.as_ref().map(|(t, _)| (w.id, *t)))
                .collect();
            return Err(Error::Protocol(format!(
                "no worker can make progress; (worker, tile) waiting: {stuck:?}"
            )));
        }
    }
}

fn run_concurrent(
    workers: &mut [Worker<'_>],
    kernel: &Kernel<'_>,
    ws: &FixupWorkspace,
    seq: &AtomicU64,
) -> Result<()> {
    let abort = AtomicBool::new(false);
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = workers
            .iter_mut()
            .map(|w| {
                let abort = &abort;
                scope.spawn(move || -> Result<()> {
                    loop {
                        if abort.load(Ordering::Relaxed) {
                            return Err(Error::Aborted(w.id));
                        }
                        match w.step(kernel, ws, seq) {
                            Ok(Step::Done) => return Ok(()),
                            Ok(Step::Progress) => {}
                            Ok(Step::Blocked) => std::thread::yield_now(),
                            Err(e) => {
                                abort.store(true, Ordering::Relaxed);
                                return Err(e);
                            }
                        }
                    }
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    let mut errors: Vec<Error> = results.into_iter().filter_map(Result::err).collect();
    // Report the root cause rather than a worker that merely stopped.
    match errors.iter().position(|e| !matches!(e, Error::Aborted(_))) {
        Some(i) => Err(errors.swap_remove(i)),
        None => errors.into_iter().next().map_or(Ok(()), Err),
    }
}

/// Executes `decomp` with `C_in = 0`.
pub fn execute(
    decomp: &Decomposition,
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    shape: &ProblemShape,
    tiles: &TileConfig,
    mode: ExecMode,
) -> Result<(MatrixBuffer, ExecutionTrace)> {
    execute_with_c(decomp, a, b, None, shape, tiles, mode)
}

pub fn execute_with_c(
    decomp: &Decomposition,
    a: &MatrixBuffer,
    b: &MatrixBuffer,
    c_in: Option<&MatrixBuffer>,
    shape: &ProblemShape,
    tiles: &TileConfig,
    mode: ExecMode,
) -> Result<(MatrixBuffer, ExecutionTrace)> {
    check_operands(a, b, c_in, shape)?;
    tiles.validate()?;
    let grid = tile_grid(shape, tiles);
    if grid != decomp.grid {
        return Err(Error::PlanMismatch(format!(
            "decomposition grid {:?} differs from problem grid {grid:?}",
            decomp.grid
        )));
    }
    decomp.validate()?;

    let started = Instant::now();
    let kernel = Kernel {
        a,
        b,
        c_in,
        shape: *shape,
        tiles: *tiles,
        grid,
    };
    let ws = FixupWorkspace::new(decomp);
    let seq = AtomicU64::new(0);
    let mut workers: Vec<Worker<'_>> = decomp
        .plans
        .iter()
        .map(|p| Worker::new(p.worker_id, &p.fragments))
        .collect();
    match mode {
        ExecMode::DeterministicSim => run_sim(&mut workers, &kernel, &ws, &seq)?,
        ExecMode::Concurrent => run_concurrent(&mut workers, &kernel, &ws, &seq)?,
    }
    ws.check_drained()?;

    let mut c = MatrixBuffer::zeros(shape.m, shape.n, a.scalar_kind);
    let mut events = Vec::new();
    let mut worker_macs = Vec::with_capacity(workers.len());
    for w in workers {
        for (tile, block) in &w.outputs {
            let ext = kernel.extent(*tile);
            for (i, row) in block.chunks_exact(ext.cols_real).enumerate() {
                let at = (ext.row0 + i) * shape.n + ext.col0;
                c.elements[at..at + ext.cols_real].copy_from_slice(row);
            }
        }
        worker_macs.push(w.macs);
        events.extend(w.events);
    }
    events.sort_by_key(|r| r.seq);
    let elapsed = started.elapsed();

    let trace = ExecutionTrace {
        kind: decomp.kind,
        g: decomp.g,
        mode,
        events,
        work_macs: worker_macs.iter().map(|&m| m as u128).sum(),
        empty_workers: decomp.plans.iter().filter(|p| p.is_empty()).count(),
        worker_macs,
        elapsed,
    };
    Ok((c, trace))
}

/// Results of running the same problem with padding on and off.
#[derive(Clone, Debug)]
pub struct PaddedPair {
    pub c_padded: MatrixBuffer,
    pub c_unpadded: MatrixBuffer,
    pub work_padded: u128,
    pub work_unpadded: u128,
    pub trace_padded: ExecutionTrace,
    pub trace_unpadded: ExecutionTrace,
}

impl PaddedPair {
    pub fn work_ratio(&self) -> f64 {
        self.work_padded as f64 / self.work_unpadded as f64
    }

    pub fn results_identical(&self) -> bool {
        self.c_padded.bit_eq(&self.c_unpadded)
    }
}

/// Runs one seeded problem twice, with every dimension padded and with none.
pub fn execute_padded_pair(
    shape: &ProblemShape,
    tiles: &TileConfig,
    kind: DecompositionKind,
    g: usize,
    scalar_kind: ScalarKind,
    seed: u64,
    mode: ExecMode,
) -> Result<PaddedPair> {
    let (a, b) = generate_matrices(shape, scalar_kind, seed);
    let padded = tiles.with_padding(true);
    let unpadded = tiles.with_padding(false);
    let decomp = partition(&tile_grid(shape, &padded), kind, g)?;
    let (c_padded, trace_padded) = execute(&decomp, &a, &b, shape, &padded, mode)?;
    let (c_unpadded, trace_unpadded) = execute(&decomp, &a, &b, shape, &unpadded, mode)?;
    Ok(PaddedPair {
        c_padded,
        c_unpadded,
        work_padded: trace_padded.work_macs,
        work_unpadded: trace_unpadded.work_macs,
        trace_padded,
        trace_unpadded,
    })
}

/// Scalar MACs a padded execution performs, independent of the schedule.
pub fn padded_work(shape: &ProblemShape, tiles: &TileConfig) -> u128 {
    padded_shape(shape, tiles).volume()
}
