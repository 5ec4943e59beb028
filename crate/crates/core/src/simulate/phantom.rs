//! A Circle-of-Willis phantom: the 16 canonical landmarks, the proximal
//! segments between them and small distal trees behind each distal
//! landmark.

use super::{
    ArterySpec, FbdEntry, FourierArtery, FourierDictionary, GridSpec, IntensityModel,
    LandmarkGraph, RadiusProfile, SimulationConfig,
};

/// Layout box edge in mm; positions are scaled to the requested grid.
const LAYOUT_MM: f64 = 95.5;

// left-side positions in mm; right side mirrors x about 48
const LEFT: [(&str, [f64; 3]); 17] = [
    ("ICA_Root", [30.0, 52.0, 12.0]),
    ("Pcomm-ICA", [32.0, 52.0, 36.0]),
    ("ICA-MCA-ACA", [34.0, 56.0, 46.0]),
    ("M1-M2", [16.0, 58.0, 50.0]),
    ("A1-A2", [44.0, 68.0, 50.0]),
    ("P1-P2-Pcomm", [36.0, 36.0, 42.0]),
    ("VA_Root", [38.0, 36.0, 6.0]),
    ("MCA_B", [10.0, 56.0, 64.0]),
    ("MCA_T1", [6.0, 46.0, 78.0]),
    ("MCA_T2", [8.0, 66.0, 80.0]),
    ("MCA_T3", [12.0, 68.0, 40.0]),
    ("ACA_B", [42.0, 80.0, 62.0]),
    ("ACA_T1", [40.0, 90.0, 74.0]),
    ("ACA_T2", [38.0, 76.0, 82.0]),
    ("PCA_B", [28.0, 22.0, 46.0]),
    ("PCA_T1", [22.0, 8.0, 44.0]),
    ("PCA_T2", [32.0, 10.0, 60.0]),
];

const MIDLINE: [(&str, [f64; 3]); 2] = [
    ("PCA-BA", [48.0, 38.0, 38.0]),
    ("BA-VA", [48.0, 40.0, 16.0]),
];

fn curve(coeffs_v: [f64; 5]) -> FourierArtery {
    FourierArtery {
        order: 2,
        coeffs_u: vec![0.0; 5],
        coeffs_v: coeffs_v.to_vec(),
        trend_u: [0.0, 1.0],
        trend_v: [0.0; 2],
    }
}

/// Shapes as lateral offsets over a unit chord; every one vanishes at both
/// ends.
pub fn dictionary() -> FourierDictionary {
    let mut fbd = FourierDictionary::default();
    let mut put = |k: &str, a: FourierArtery| {
        fbd.entries.insert(
            k.into(),
            FbdEntry {
                artery: a,
                default_radius_profile: None,
            },
        );
    };
    put("straight", FourierArtery::straight());
    // A (1 - cos 2πs) / 2
    put("bend", curve([0.06, -0.06, 0.0, 0.0, 0.0]));
    put("bend_small", curve([0.035, -0.035, 0.0, 0.0, 0.0]));
    put("s_curve", curve([0.0, 0.0, 0.08, 0.0, 0.0]));
    put("siphon", curve([0.06, -0.06, 0.0, 0.0, 0.04]));
    put("wiggle", curve([0.0, 0.0, 0.05, 0.0, 0.03]));
    fbd
}

fn side(label: &str, s: &str) -> String {
    match label {
        "PCA-BA" | "BA-VA" => label.to_string(),
        _ => format!("{label}_{s}"),
    }
}

/// Phantom on an `n`³ grid with the given isotropic spacing.
pub fn circle_of_willis(
    n: usize,
    spacing: f64,
) -> (LandmarkGraph, FourierDictionary, SimulationConfig) {
    let f = (n - 1) as f64 * spacing / LAYOUT_MM;
    let mut graph = LandmarkGraph::default();
    for (s, mirror) in [("L", false), ("R", true)] {
        for (label, p) in LEFT {
            let x = if mirror { 96.0 - p[0] } else { p[0] };
            graph
                .nodes
                .insert(side(label, s), [x * f, p[1] * f, p[2] * f]);
        }
    }
    for (label, p) in MIDLINE {
        graph.nodes.insert(label.into(), p.map(|c| c * f));
    }

    let mut arteries = Vec::new();
    let mut add = |name: String, a: String, b: String, key: &str, row: String, r: [f64; 2]| {
        arteries.push(ArterySpec {
            name,
            start_label: a,
            end_label: b,
            radius_profile: Some(RadiusProfile::new(r.to_vec()).expect("positive radii")),
            fbd_key: key.into(),
            row: Some(row),
            normal: None,
        });
    };
    for s in ["L", "R"] {
        let l = |x: &str| side(x, s);
        add(
            format!("ICA_{s}_cavernous"),
            l("ICA_Root"),
            l("Pcomm-ICA"),
            "siphon",
            l("ICA"),
            [2.0, 1.9],
        );
        add(
            format!("ICA_{s}_terminal"),
            l("Pcomm-ICA"),
            l("ICA-MCA-ACA"),
            "bend_small",
            l("ICA"),
            [1.9, 1.8],
        );
        add(
            l("M1"),
            l("ICA-MCA-ACA"),
            l("M1-M2"),
            "s_curve",
            l("M1"),
            [1.5, 1.3],
        );
        add(
            l("A1"),
            l("ICA-MCA-ACA"),
            l("A1-A2"),
            "bend",
            l("A1"),
            [1.2, 1.1],
        );
        add(
            l("Pcomm"),
            l("Pcomm-ICA"),
            l("P1-P2-Pcomm"),
            "bend",
            l("Pcomm"),
            [0.9, 0.9],
        );
        add(
            l("P1"),
            "PCA-BA".into(),
            l("P1-P2-Pcomm"),
            "bend_small",
            l("P1"),
            [1.2, 1.1],
        );
        add(
            l("VA"),
            "BA-VA".into(),
            l("VA_Root"),
            "bend",
            l("VA"),
            [1.5, 1.5],
        );

        let mca = format!("MCA_{s}");
        add(
            format!("{mca}_trunk"),
            l("M1-M2"),
            l("MCA_B"),
            "wiggle",
            mca.clone(),
            [1.2, 1.1],
        );
        add(
            format!("{mca}_b1"),
            l("MCA_B"),
            l("MCA_T1"),
            "s_curve",
            mca.clone(),
            [1.0, 0.9],
        );
        add(
            format!("{mca}_b2"),
            l("MCA_B"),
            l("MCA_T2"),
            "bend",
            mca.clone(),
            [1.0, 0.9],
        );
        add(
            format!("{mca}_b3"),
            l("M1-M2"),
            l("MCA_T3"),
            "wiggle",
            mca,
            [1.1, 0.9],
        );

        add(
            format!("ACA_{s}_trunk"),
            l("A1-A2"),
            l("ACA_B"),
            "bend_small",
            "ACA".into(),
            [1.1, 1.0],
        );
        add(
            format!("ACA_{s}_b1"),
            l("ACA_B"),
            l("ACA_T1"),
            "s_curve",
            "ACA".into(),
            [1.0, 0.9],
        );
        add(
            format!("ACA_{s}_b2"),
            l("ACA_B"),
            l("ACA_T2"),
            "bend",
            "ACA".into(),
            [1.0, 0.9],
        );

        let pca = format!("PCA_{s}");
        add(
            format!("{pca}_trunk"),
            l("P1-P2-Pcomm"),
            l("PCA_B"),
            "wiggle",
            pca.clone(),
            [1.1, 1.0],
        );
        add(
            format!("{pca}_b1"),
            l("PCA_B"),
            l("PCA_T1"),
            "s_curve",
            pca.clone(),
            [1.0, 0.9],
        );
        add(
            format!("{pca}_b2"),
            l("PCA_B"),
            l("PCA_T2"),
            "bend",
            pca,
            [1.0, 0.9],
        );
    }
    add(
        "Acomm".into(),
        "A1-A2_L".into(),
        "A1-A2_R".into(),
        "bend_small",
        "Acomm".into(),
        [1.0, 1.0],
    );
    add(
        "BA".into(),
        "PCA-BA".into(),
        "BA-VA".into(),
        "bend_small",
        "BA".into(),
        [1.6, 1.6],
    );

    let config = SimulationConfig {
        grid: GridSpec {
            dims: [n; 3],
            spacing: [spacing; 3],
        },
        arteries,
        intensity: IntensityModel::default(),
        jitter_deg: 15.0,
        seed: 0,
        samples_per_mm: 20.0,
        classification: None,
    };
    (graph, dictionary(), config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::{ClassificationConfig, CANONICAL_LABELS};

    #[test]
    fn layout_covers_the_canonical_labels() {
        let (g, fbd, c) = circle_of_willis(192, 0.5);
        for l in CANONICAL_LABELS {
            assert!(g.nodes.contains_key(l), "{l}");
        }
        for a in &c.arteries {
            assert!(
                g.nodes.contains_key(&a.start_label) && g.nodes.contains_key(&a.end_label),
                "{}",
                a.name
            );
            assert!(fbd.entries.contains_key(&a.fbd_key));
        }
        let cc = ClassificationConfig::default();
        let rows: Vec<&str> = cc
            .segments
            .iter()
            .map(|s| s.name.as_str())
            .chain(cc.subnetworks.iter().map(|s| s.name.as_str()))
            .collect();
        assert!(c.arteries.iter().all(|a| rows.contains(&a.row())));
        for fa in fbd.entries.values() {
            let ends = [fa.artery.eval(0.0), fa.artery.eval(1.0)];
            assert!(ends[0][1].abs() < 1e-12 && ends[1][1].abs() < 1e-12);
        }
    }
}
