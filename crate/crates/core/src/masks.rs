//! Dynamic-mask aggregation, staticness maps and mask IoU.

use crate::align::FrameGraph;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Soft dynamic probability for the first frame of one graph edge.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMask {
    pub edge: (usize, usize),
    pub values: Grid<f64>,
}

/// Aggregated per-frame dynamic probability.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMask(pub Grid<f64>);

/// Per-pixel staticness, the complement of a [`FrameMask`].
#[derive(Clone, Debug, PartialEq)]
pub struct StaticnessMap(pub Grid<f64>);

fn check_unit_interval(values: &Grid<f64>) -> Result<()> {
    if let Some((u, v, x)) = values.indexed().find(|(_, _, x)| !(0.0..=1.0).contains(*x)) {
        return Err(Error::InvalidInput(format!(
            "mask value {x} at ({u}, {v}) is outside [0, 1]"
        )));
    }
    Ok(())
}

impl PairMask {
    pub fn new(edge: (usize, usize), values: Grid<f64>) -> Result<Self> {
        check_unit_interval(&values)?;
        Ok(Self { edge, values })
    }
}

impl FrameMask {
    pub fn new(values: Grid<f64>) -> Result<Self> {
        check_unit_interval(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 0.0))
    }

    pub fn values(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

impl StaticnessMap {
    pub fn values(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, 1.0))
    }
}

/// Mean of the pair masks on every edge whose first frame is `t`.
///
/// `pair_masks` is indexed like `graph.edges()`.
pub fn aggregate_masks(graph: &FrameGraph, pair_masks: &[PairMask], t: usize) -> Result<FrameMask> {
    let mut acc: Option<Grid<f64>> = None;
    let mut count = 0usize;
    for mask in pair_masks.iter().filter(|m| m.edge.0 == t) {
        if !graph.contains_edge(mask.edge) {
            return Err(Error::InvalidInput(format!(
                "pair mask for edge {:?} has no matching graph edge",
                mask.edge
            )));
        }
        match acc.as_mut() {
            None => acc = Some(mask.values.clone()),
            Some(a) => {
                a.same_shape(&mask.values)?;
                for (x, y) in a.as_mut_slice().iter_mut().zip(mask.values.iter()) {
                    *x += y;
                }
            }
        }
        count += 1;
    }
    let mut acc = acc.ok_or(Error::NoEdgesForFrame(t))?;
    let n = count as f64;
    for x in acc.as_mut_slice() {
        *x /= n;
    }
    Ok(FrameMask(acc))
}

/// Aggregates a mask for every vertex of the graph.
pub fn aggregate_all(graph: &FrameGraph, pair_masks: &[PairMask]) -> Result<Vec<FrameMask>> {
    (0..graph.num_frames())
        .map(|t| aggregate_masks(graph, pair_masks, t))
        .collect()
}

pub fn staticness_from_mask(m: &FrameMask) -> StaticnessMap {
    StaticnessMap(m.0.map(|x| 1.0 - x))
}

/// Dynamic iff the probability reaches `threshold`.
#[inline]
pub fn is_dynamic(p: f64, threshold: f64) -> bool {
    p >= threshold
}

/// Intersection over union of the dynamic sets after binarizing at `threshold`.
/// Two all-static masks score 1.
pub fn mask_iou(pred: &FrameMask, gt: &FrameMask, threshold: f64) -> Result<f64> {
    pred.0.same_shape(&gt.0)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.0.iter().zip(gt.0.iter()) {
        let (p, g) = (is_dynamic(p, threshold), is_dynamic(g, threshold));
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Grows the binarized dynamic set by a square structuring element of the
/// given radius. Radius 0 returns the binarized mask.
pub fn dilate(mask: &FrameMask, threshold: f64, radius: usize) -> FrameMask {
    let g = &mask.0;
    let (w, h) = g.shape();
    let r = radius as isize;
    FrameMask(Grid::from_fn(w, h, |u, v| {
        for dv in -r..=r {
            for du in -r..=r {
                let (x, y) = (u as isize + du, v as isize + dv);
                if x >= 0
                    && y >= 0
                    && (x as usize) < w
                    && (y as usize) < h
                    && is_dynamic(*g.get(x as usize, y as usize), threshold)
                {
                    return 1.0;
                }
            }
        }
        0.0
    }))
}
