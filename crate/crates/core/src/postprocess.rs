//! Connected-component analysis and largest-component filtering.
//!
//! Connectivity is the inclusive convention: 26-neighborhood in 3D,
//! 8-neighborhood in 2D. Components are reported largest first; equal sizes
//! are ordered by their smallest linear voxel index so every consumer sees
//! the same partition.

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeKind};

/// All connected components of `mask` (one bool per voxel of `dims`), each a
/// sorted list of linear indices, ordered by descending size then ascending
/// minimum index.
pub fn connected_components(mask: &[bool], dims: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = dims.iter().product();
    debug_assert_eq!(mask.len(), total);
    let mut visited = vec![false; total];
    let mut components = Vec::new();
    let mut queue: Vec<usize> = Vec::new();

    // neighbor strides for the full Moore neighborhood
    let offsets = moore_offsets(dims);

    for seed in 0..total {
        if !mask[seed] || visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.clear();
        queue.push(seed);
        let mut comp = vec![seed];
        while let Some(idx) = queue.pop() {
            let coord = unravel(idx, dims);
            for off in &offsets {
                let mut ok = true;
                let mut nidx = 0usize;
                for (a, &d) in dims.iter().enumerate() {
                    let c = coord[a] as i64 + off[a];
                    if c < 0 || c >= d as i64 {
                        ok = false;
                        break;
                    }
                    nidx = nidx * d + c as usize;
                }
                if ok && mask[nidx] && !visited[nidx] {
                    visited[nidx] = true;
                    queue.push(nidx);
                    comp.push(nidx);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    // BFS seeds appear in scan order, so comp[0] is the component minimum.
    components.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    components
}

fn moore_offsets(dims: &[usize]) -> Vec<Vec<i64>> {
    let nd = dims.len();
    let mut offsets = Vec::new();
    let count = 3usize.pow(nd as u32);
    for code in 0..count {
        let mut c = code;
        let mut off = vec![0i64; nd];
        for item in off.iter_mut() {
            *item = (c % 3) as i64 - 1;
            c /= 3;
        }
        if off.iter().any(|&v| v != 0) {
            offsets.push(off);
        }
    }
    offsets
}

fn unravel(mut idx: usize, dims: &[usize]) -> Vec<usize> {
    let mut coord = vec![0usize; dims.len()];
    for a in (0..dims.len()).rev() {
        coord[a] = idx % dims[a];
        idx /= dims[a];
    }
    coord
}

/// Number of connected components of class `class` in a labelmap.
pub fn count_components(label: &Volume, class: u8) -> usize {
    let mask: Vec<bool> = label.as_u8().iter().map(|&v| v == class).collect();
    if !mask.iter().any(|&m| m) {
        return 0;
    }
    connected_components(&mask, label.shape()).len()
}

/// For each class in `classes`, relabel every voxel outside the class's
/// largest connected component to background (0). Other classes untouched.
pub fn apply_postprocessing(pred: &Volume, classes: &[u8]) -> Result<Volume> {
    if pred.kind() != VolumeKind::Labelmap {
        return Err(Error::validation("postprocessing expects a labelmap"));
    }
    let dims = pred.shape().to_vec();
    let mut data = pred.as_u8().to_vec();
    for &class in classes {
        if class == 0 {
            continue;
        }
        let mask: Vec<bool> = data.iter().map(|&v| v == class).collect();
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let comps = connected_components(&mask, &dims);
        for comp in comps.iter().skip(1) {
            for &idx in comp {
                data[idx] = 0;
            }
        }
    }
    Volume::new_labelmap(dims, pred.spacing().to_vec(), data)
}
