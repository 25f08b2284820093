//! Window partitioning, padding, shuffle-region grouping and token merging.
//!
//! All layouts are channel-last. A feature map is `[B×H×W×C]`; its windowed
//! form is `[B×(H/w)×(W/w)×w²×C]` with tokens of a window in row-major order.
//! Every transformation here is an index permutation applied through
//! [`Tape::gather`], so gradients follow for free.

use std::cell::Cell;

use crate::block::MsgTokens;
use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var, FILL};

thread_local! {
    static PARTITION_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of [`partition_windows`] calls on this thread since the last reset.
pub fn partition_calls() -> usize {
    PARTITION_CALLS.with(Cell::get)
}

pub fn reset_partition_calls() {
    PARTITION_CALLS.with(|c| c.set(0));
}

/// Patch tokens `[B×H×W×C]` of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub tokens: Var,
    pub stage: usize,
}

/// Batch, height, width and channel extents of a `[B×H×W×C]` value.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapDims {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [batch, height, width, channels] => Ok(Self { batch, height, width, channels }),
            _ => Err(dim_err!("expected a [B, H, W, C] feature map, got {shape:?}")),
        }
    }
}

impl FeatureMap {
    pub fn dims<T: Scalar>(&self, tape: &Tape<T>) -> Result<MapDims> {
        MapDims::of(tape.shape(self.tokens))
    }
}

/// Windowed tokens `[B×gh×gw×N×C]`, `N = w²` or `w²+1` when slot 0 holds a messenger.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowedTokens {
    pub windows: Var,
    pub window_size: usize,
    pub with_msg: bool,
}

impl WindowedTokens {
    /// `(batch, grid rows, grid cols, tokens per window, channels)`.
    pub fn dims<T: Scalar>(&self, tape: &Tape<T>) -> Result<(usize, usize, usize, usize, usize)> {
        match *tape.shape(self.windows) {
            [b, gh, gw, n, c] => Ok((b, gh, gw, n, c)),
            ref s => Err(dim_err!("expected [B, gh, gw, N, C] windows, got {s:?}")),
        }
    }
}

/// Extents before padding, needed to crop back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OriginalExtents {
    pub height: usize,
    pub width: usize,
}

fn apply<T: Scalar>(t: &Tensor<T>, idx: &[usize], shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::new(shape, idx.iter().map(|&i| if i == FILL { T::zero() } else { t.data()[i] }).collect())
}

fn partition_index(d: MapDims, w: usize) -> Vec<usize> {
    let (gh, gw) = (d.height / w, d.width / w);
    let c = d.channels;
    let mut idx = Vec::with_capacity(d.batch * d.height * d.width * c);
    for b in 0..d.batch {
        for i in 0..gh {
            for j in 0..gw {
                for k in 0..w * w {
                    let (y, x) = (i * w + k / w, j * w + k % w);
                    let base = ((b * d.height + y) * d.width + x) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    idx
}

fn check_divisible(d: MapDims, w: usize) -> Result<()> {
    if w == 0 {
        return Err(config_err!("window size must be positive"));
    }
    if !d.height.is_multiple_of(w) || !d.width.is_multiple_of(w) {
        return Err(Error::Partition(format!(
            "{}×{} feature map is not divisible by window size {w}; pad it first",
            d.height, d.width
        )));
    }
    Ok(())
}

/// Splits `[B×H×W×C]` into non-overlapping `w×w` windows.
pub fn partition_windows<T: Scalar>(tape: &mut Tape<T>, fm: FeatureMap, w: usize) -> Result<WindowedTokens> {
    let d = fm.dims(tape)?;
    check_divisible(d, w)?;
    PARTITION_CALLS.with(|c| c.set(c.get() + 1));
    let idx = partition_index(d, w);
    let shape = [d.batch, d.height / w, d.width / w, w * w, d.channels];
    let windows = tape.gather(fm.tokens, idx.into(), &shape)?;
    Ok(WindowedTokens { windows, window_size: w, with_msg: false })
}

/// Inverse of [`partition_windows`]. Messenger tokens must be detached first.
pub fn reverse_windows<T: Scalar>(tape: &mut Tape<T>, wt: WindowedTokens, stage: usize) -> Result<FeatureMap> {
    if wt.with_msg {
        return Err(Error::Contract("reverse_windows: detach messenger tokens first".into()));
    }
    let (b, gh, gw, n, c) = wt.dims(tape)?;
    let w = wt.window_size;
    if n != w * w {
        return Err(dim_err!("reverse_windows: {n} tokens per window, expected {}", w * w));
    }
    let d = MapDims { batch: b, height: gh * w, width: gw * w, channels: c };
    let fwd = partition_index(d, w);
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    let tokens = tape.gather(wt.windows, inv.into(), &[b, d.height, d.width, c])?;
    Ok(FeatureMap { tokens, stage })
}

/// Partitions a plain tensor; see [`partition_windows`].
pub fn partition_tensor<T: Scalar>(t: &Tensor<T>, w: usize) -> Result<Tensor<T>> {
    let d = MapDims::of(t.shape())?;
    check_divisible(d, w)?;
    apply(t, &partition_index(d, w), &[d.batch, d.height / w, d.width / w, w * w, d.channels])
}

/// Inverse of [`partition_tensor`].
pub fn reverse_tensor<T: Scalar>(t: &Tensor<T>, w: usize) -> Result<Tensor<T>> {
    let [b, gh, gw, n, c] = *t.shape() else {
        return Err(dim_err!("expected [B, gh, gw, N, C] windows, got {:?}", t.shape()));
    };
    if n != w * w {
        return Err(dim_err!("{n} tokens per window, expected {}", w * w));
    }
    let d = MapDims { batch: b, height: gh * w, width: gw * w, channels: c };
    let fwd = partition_index(d, w);
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    apply(t, &inv, &[b, d.height, d.width, c])
}

fn resize_index(from: MapDims, height: usize, width: usize) -> Vec<usize> {
    let c = from.channels;
    let mut idx = Vec::with_capacity(from.batch * height * width * c);
    for b in 0..from.batch {
        for y in 0..height {
            for x in 0..width {
                if y < from.height && x < from.width {
                    let base = ((b * from.height + y) * from.width + x) * c;
                    idx.extend(base..base + c);
                } else {
                    idx.extend(std::iter::repeat_n(FILL, c));
                }
            }
        }
    }
    idx
}

pub fn padded_extent(n: usize, w: usize) -> usize {
    n.div_ceil(w) * w
}

/// Zero-pads the bottom and right edges up to the next multiple of `w`.
pub fn pad_to_window_multiple<T: Scalar>(
    tape: &mut Tape<T>,
    fm: FeatureMap,
    w: usize,
) -> Result<(FeatureMap, OriginalExtents)> {
    let d = fm.dims(tape)?;
    let orig = OriginalExtents { height: d.height, width: d.width };
    let (ph, pw) = (padded_extent(d.height, w), padded_extent(d.width, w));
    if (ph, pw) == (d.height, d.width) {
        return Ok((fm, orig));
    }
    let idx = resize_index(d, ph, pw);
    let tokens = tape.gather(fm.tokens, idx.into(), &[d.batch, ph, pw, d.channels])?;
    Ok((FeatureMap { tokens, stage: fm.stage }, orig))
}

/// Drops padding added by [`pad_to_window_multiple`].
pub fn crop<T: Scalar>(tape: &mut Tape<T>, fm: FeatureMap, orig: OriginalExtents) -> Result<FeatureMap> {
    let d = fm.dims(tape)?;
    if (d.height, d.width) == (orig.height, orig.width) {
        return Ok(fm);
    }
    if orig.height > d.height || orig.width > d.width {
        return Err(dim_err!("crop: {}×{} is larger than {}×{}", orig.height, orig.width, d.height, d.width));
    }
    let idx = resize_index(d, orig.height, orig.width);
    let tokens = tape.gather(fm.tokens, idx.into(), &[d.batch, orig.height, orig.width, d.channels])?;
    Ok(FeatureMap { tokens, stage: fm.stage })
}

/// Zero-pads or crops a `[B×H×W×C]` value to the given extents.
pub(crate) fn resize_grid<T: Scalar>(tape: &mut Tape<T>, x: Var, height: usize, width: usize) -> Result<Var> {
    let d = MapDims::of(tape.shape(x))?;
    if (d.height, d.width) == (height, width) {
        return Ok(x);
    }
    let idx = resize_index(d, height, width);
    tape.gather(x, idx.into(), &[d.batch, height, width, d.channels])
}

pub fn pad_tensor<T: Scalar>(t: &Tensor<T>, w: usize) -> Result<(Tensor<T>, OriginalExtents)> {
    let d = MapDims::of(t.shape())?;
    let (ph, pw) = (padded_extent(d.height, w), padded_extent(d.width, w));
    let padded = apply(t, &resize_index(d, ph, pw), &[d.batch, ph, pw, d.channels])?;
    Ok((padded, OriginalExtents { height: d.height, width: d.width }))
}

pub fn crop_tensor<T: Scalar>(t: &Tensor<T>, orig: OriginalExtents) -> Result<Tensor<T>> {
    let d = MapDims::of(t.shape())?;
    apply(t, &resize_index(d, orig.height, orig.width), &[d.batch, orig.height, orig.width, d.channels])
}

/// Corner to which complete `R×R` tiles are aligned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Anchor {
    TopLeft,
    BottomRight,
}

impl Anchor {
    pub fn flipped(self) -> Self {
        match self {
            Anchor::TopLeft => Anchor::BottomRight,
            Anchor::BottomRight => Anchor::TopLeft,
        }
    }
}

/// Grouping of a `gh×gw` window grid into shuffle regions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShuffleRegionView {
    pub grid: (usize, usize),
    pub region_size: usize,
    pub anchor: Anchor,
    /// Strict views reject channel counts that the region size does not divide.
    pub strict: bool,
    /// Window coordinates of each region, row-major within the region.
    regions: Vec<Vec<(usize, usize)>>,
}

fn tile_starts(extent: usize, r: usize, anchor: Anchor) -> Vec<usize> {
    let lead = match anchor {
        Anchor::TopLeft => 0,
        Anchor::BottomRight => extent % r,
    };
    let mut starts = Vec::new();
    if lead > 0 {
        starts.push(0);
    }
    starts.extend((lead..extent).step_by(r));
    starts
}

/// Groups the window grid into `R×R` regions aligned to `anchor`.
///
/// When the grid is not a multiple of `R`, leftover windows form partial
/// regions: at the bottom/right for [`Anchor::TopLeft`] and at the top/left
/// for [`Anchor::BottomRight`].
pub fn group_regions(grid: (usize, usize), r: usize, anchor: Anchor, strict: bool) -> Result<ShuffleRegionView> {
    let (gh, gw) = grid;
    if r == 0 {
        return Err(config_err!("shuffle size must be at least 1"));
    }
    if gh == 0 || gw == 0 {
        return Err(dim_err!("window grid {gh}×{gw} is empty"));
    }
    let mut r = r;
    if r > gh && r > gw {
        if strict {
            return Err(config_err!("shuffle size {r} exceeds the {gh}×{gw} window grid"));
        }
        r = gh.max(gw);
    }
    let rows = tile_starts(gh, r, anchor);
    let cols = tile_starts(gw, r, anchor);
    let end = |starts: &[usize], i: usize, extent: usize| starts.get(i + 1).copied().unwrap_or(extent);
    let mut regions = Vec::with_capacity(rows.len() * cols.len());
    for (ri, &r0) in rows.iter().enumerate() {
        for (ci, &c0) in cols.iter().enumerate() {
            let mut region = Vec::new();
            for y in r0..end(&rows, ri, gh) {
                for x in c0..end(&cols, ci, gw) {
                    region.push((y, x));
                }
            }
            regions.push(region);
        }
    }
    Ok(ShuffleRegionView { grid, region_size: r, anchor, strict, regions })
}

impl ShuffleRegionView {
    pub fn regions(&self) -> &[Vec<(usize, usize)>] {
        &self.regions
    }

    /// Region index of every window, row-major over the grid.
    pub fn region_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.grid.0 * self.grid.1];
        for (ri, region) in self.regions.iter().enumerate() {
            for &(y, x) in region {
                out[y * self.grid.1 + x] = ri;
            }
        }
        out
    }
}

/// Token merging between stages: one stride-2 3×3 convolution (padding 1)
/// applied to both the patch grid and the messenger grid with the same weights.
pub fn merge_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    fm: FeatureMap,
    msg: Option<MsgTokens>,
    weight: Var,
    bias: Var,
) -> Result<(FeatureMap, Option<MsgTokens>)> {
    let c = fm.dims(tape)?.channels;
    let wshape = tape.shape(weight).to_vec();
    if wshape.len() != 4 || wshape[2] != c {
        return Err(dim_err!("merge_tokens: {c}-channel tokens with kernel {wshape:?}"));
    }
    let tokens = tape.conv2d(fm.tokens, weight, bias, 2, 1)?;
    let merged = FeatureMap { tokens, stage: fm.stage + 1 };
    let msg = match msg {
        Some(m) => {
            let mc = MapDims::of(tape.shape(m.grid))?.channels;
            if mc != c {
                return Err(dim_err!("merge_tokens: messenger channels {mc} differ from patch channels {c}"));
            }
            Some(MsgTokens { grid: tape.conv2d(m.grid, weight, bias, 2, 1)? })
        }
        None => None,
    };
    Ok((merged, msg))
}
