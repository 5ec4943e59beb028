//! Maximum-intensity projections with node overlays for landmark labeling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::VesselFusedNetwork;
use crate::volume::Volume3D;

/// One projection. `axis` is the collapsed axis (0 = x, 1 = y, 2 = z); the
/// image keeps the other two axes in ascending order, first axis fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MipView {
    pub axis: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub nodes: Vec<NodeProjection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeProjection {
    pub id: usize,
    pub u: usize,
    pub v: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidePackage {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub views: Vec<MipView>,
}

fn kept_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

pub fn mip(vol: &Volume3D, axis: usize) -> (usize, usize, Vec<f32>) {
    let d = vol.dims();
    let (a, b) = kept_axes(axis);
    let (w, h) = (d[a], d[b]);
    let mut out = vec![f32::NEG_INFINITY; w * h];
    for (i, &val) in vol.data().iter().enumerate() {
        let c = [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])];
        let p = &mut out[c[a] + w * c[b]];
        let val = val as f32;
        if val > *p {
            *p = val;
        }
    }
    (w, h, out)
}

pub fn labeling_guide(vol: &Volume3D, net: &VesselFusedNetwork) -> Result<GuidePackage> {
    if vol.dims() != net.grid().dims {
        return Err(Error::DimensionMismatch(format!(
            "volume {:?} vs network {:?}",
            vol.dims(),
            net.grid().dims
        )));
    }
    let views = (0..3)
        .map(|axis| {
            let (width, height, pixels) = mip(vol, axis);
            let (a, b) = kept_axes(axis);
            let nodes = net
                .nodes()
                .iter()
                .map(|n| {
                    let c = net.grid().coord(n.voxel);
                    NodeProjection {
                        id: n.id,
                        u: c[a],
                        v: c[b],
                    }
                })
                .collect();
            MipView {
                axis,
                width,
                height,
                pixels,
                nodes,
            }
        })
        .collect();
    Ok(GuidePackage {
        dims: vol.dims(),
        spacing: vol.spacing(),
        views,
    })
}

impl GuidePackage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("guide serializes")
    }

    pub fn pixel(&self, axis: usize, u: usize, v: usize) -> f32 {
        let view = &self.views[axis];
        view.pixels[u + view.width * v]
    }
}
