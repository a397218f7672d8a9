//! Binary morphology on masks: ball dilation/erosion via exact distance
//! transforms, closing, and connected-component filtering.

use std::collections::VecDeque;

use crate::error::Result;
use crate::noise::squared_edt;
use crate::volume::{Mask, Volume};

/// Voxels within Euclidean distance `radius` of the mask.
pub fn dilate(mask: &Mask, radius: f64) -> Mask {
    if radius <= 0.0 || !mask.any() {
        return mask.clone();
    }
    let d = squared_edt(mask);
    let r2 = radius * radius;
    Volume::new(*mask.geometry(), d.into_iter().map(|v| v <= r2).collect()).expect("same geometry")
}

/// Voxels farther than `radius` from every unset voxel. The grid exterior
/// counts as set, so masks touching a face are not eroded from it.
pub fn erode(mask: &Mask, radius: f64) -> Mask {
    if radius <= 0.0 || mask.all() {
        return mask.clone();
    }
    dilate(&mask.not(), radius).not()
}

pub fn close(mask: &Mask, radius: f64) -> Mask {
    erode(&dilate(mask, radius), radius)
}

/// 6-connected component sizes; returns per-voxel component ids (0 = unset).
pub fn components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let g = *mask.geometry();
    let mut ids = vec![0u32; g.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..g.len() {
        if !mask.data()[seed] || ids[seed] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[seed] = id;
        queue.push_back(seed);
        let mut n = 0usize;
        while let Some(i) = queue.pop_front() {
            n += 1;
            let c = g.coords(i);
            for a in 0..3 {
                let s = [1, g.dims[0], g.dims[0] * g.dims[1]][a];
                if c[a] > 0 && mask.data()[i - s] && ids[i - s] == 0 {
                    ids[i - s] = id;
                    queue.push_back(i - s);
                }
                if c[a] + 1 < g.dims[a] && mask.data()[i + s] && ids[i + s] == 0 {
                    ids[i + s] = id;
                    queue.push_back(i + s);
                }
            }
        }
        sizes.push(n);
    }
    (ids, sizes)
}

/// Drops 6-connected components smaller than `min_size` voxels.
pub fn remove_small_components(mask: &Mask, min_size: usize) -> Result<Mask> {
    let (ids, sizes) = components(mask);
    let data = ids.iter().map(|&id| id != 0 && sizes[id as usize - 1] >= min_size).collect();
    Volume::new(*mask.geometry(), data)
}
