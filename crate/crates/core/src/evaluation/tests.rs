use super::*;
use crate::data::{generate_color_position, hue_to_rgb};
use crate::model::ModelConfig;

fn small_params(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        image_size: 32,
        latent_dim: 4,
        num_attributes: 2,
        context_dim: 3,
    };
    ModelParams::init(cfg, &mut RngState::new(seed)).unwrap()
}

fn dataset() -> FactorDataset {
    generate_color_position(8, 4, 4, 32, 7).unwrap()
}

#[test]
fn report_has_one_finite_entry_per_chunk() {
    let report = informativeness_report(&small_params(1), &dataset(), 120, 8, 3, 5).unwrap();
    let names: Vec<&str> = report.chunks.iter().map(|c| c.chunk.as_str()).collect();
    assert_eq!(names, ["z_f1", "z_f2", "z_u"]);
    for c in &report.chunks {
        assert!(c.estimate.value.is_finite() && c.estimate.value >= 0.0);
        assert_eq!((c.estimate.n, c.estimate.k_neighbors), (120, 3));
    }
    assert!(report.pca_explained > 0.0 && report.pca_explained <= 1.0);
    assert_eq!(report, informativeness_report(&small_params(1), &dataset(), 120, 8, 3, 5).unwrap());
}

#[test]
fn constant_chunk_carries_no_information() {
    let mut params = small_params(2);
    let d = params.config.latent_dim;
    let w = params.encoder.get_mut("encoder.head.weight").unwrap();
    let cols = w.shape()[1];
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        if i % cols < d {
            *v = 0.0;
        }
    }
    params.encoder.get_mut("encoder.head.bias").unwrap().data_mut()[..d].fill(0.0);
    let report = informativeness_report(&params, &dataset(), 128, 8, 3, 0).unwrap();
    assert!(report.chunks[0].estimate.value < 0.05, "{:?}", report.chunks[0]);
}

#[test]
fn too_many_pca_dims_is_a_config_error() {
    let err = informativeness_report(&small_params(3), &dataset(), 100, 3 * 32 * 32 + 1, 3, 0);
    assert!(matches!(err, Err(Error::Config(_))));
    assert!(matches!(informativeness_report(&small_params(3), &dataset(), 129, 8, 3, 0), Err(Error::Config(_))));
}

#[test]
fn projection_labels_every_chunk_of_every_sample() {
    let params = small_params(4);
    let a = project_latents_2d(&params, &dataset(), 64, 1).unwrap();
    assert_eq!(a.points.len(), 192);
    assert_eq!(a.labels.iter().filter(|l| *l == "z_u").count(), 64);
    assert_eq!(a.labels[0], "z_f1");
    assert!(a.explained[0] >= a.explained[1] && a.explained[1] >= 0.0 && a.explained[0] <= 1.0);
    assert_eq!(a, project_latents_2d(&params, &dataset(), 64, 1).unwrap());
    let csv = projection_csv(&a);
    assert!(csv.starts_with("x,y,chunk_label\n"));
    assert_eq!(csv.lines().count(), 193);
}

#[test]
fn projection_needs_three_points() {
    let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 3.0]);
    assert!(matches!(project_2d(&m, vec!["a".into(); 2]), Err(Error::Config(_))));
}

#[test]
fn swap_grid_layout_and_identity() {
    let params = small_params(5);
    let ds = dataset();
    let a = ds.images.select_rows(&[0, 17, 33]).unwrap();
    let b = ds.images.select_rows(&[90, 4, 121]).unwrap();

    let same = render_swap_grid(&params, &a, &a, 1).unwrap();
    assert_eq!(same.swapped, same.recon_a);
    assert_eq!(same.image.shape(), &[3, 3 * 32, 3 * 32]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.ppm");
    let grid = swap_grid(&params, &a, &b, 2, &path).unwrap();
    let code_a = encode_mean(&a, &params).unwrap();
    let code_b = encode_mean(&b, &params).unwrap();
    let s = swap_attribute(&code_a, &code_b, 2).unwrap();
    assert_eq!(grid.swapped, decode(&s.z_f, &s.z_u, &params).unwrap());
    // Row 3, tile 2 of the grid is the second swapped image.
    let img = &grid.image;
    let (gh, gw) = (96, 96);
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                let g = img.data()[(c * gh + 64 + y) * gw + 32 + x];
                let t = grid.swapped.data()[((3 + c) * 32 + y) * 32 + x];
                assert_eq!(g, t);
            }
        }
    }
    let bytes = fs::read(&path).unwrap();
    let header = b"P6\n96 96\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 96 * 96 * 3);

    let bad = dir.path().join("missing").join("grid.ppm");
    assert!(matches!(swap_grid(&params, &a, &b, 1, &bad), Err(Error::Io { .. })));
    assert!(render_swap_grid(&params, &a, &b, 3).is_err());
}

fn square_image(size: usize, top: usize, left: usize, side: usize, rgb: [f64; 3], bg: f32) -> Tensor {
    let mut t = Tensor::full(&[1, 3, size, size], bg);
    for (c, v) in rgb.iter().enumerate() {
        for y in top..top + side {
            for x in left..left + side {
                t.data_mut()[(c * size + y) * size + x] = *v as f32;
            }
        }
    }
    t
}

#[test]
fn red_square_has_zero_hue() {
    let p = factor_probe(&square_image(32, 3, 5, 8, [1.0, 0.0, 0.0], 0.5)).unwrap()[0].unwrap();
    assert!(hue_distance(p.hue.unwrap(), 0.0) < 0.02);
    assert_eq!(p.pixels, 64);
}

#[test]
fn centered_square_has_centered_centroid() {
    let p = factor_probe(&square_image(32, 12, 12, 8, hue_to_rgb(0.4), 0.1)).unwrap()[0].unwrap();
    assert!((p.centroid.0 - 16.0).abs() <= 0.5 && (p.centroid.1 - 16.0).abs() <= 0.5);
    assert!(hue_distance(p.hue.unwrap(), 0.4) < 1e-9);
}

#[test]
fn blank_image_gives_a_null_probe() {
    assert_eq!(factor_probe(&Tensor::full(&[2, 3, 16, 16], 0.3)).unwrap(), vec![None, None]);
    let gray = factor_probe(&square_image(16, 4, 4, 6, [0.9; 3], 0.1)).unwrap()[0].unwrap();
    assert_eq!(gray.hue, None);
}

#[test]
fn probe_recovers_every_generator_factor() {
    let ds = dataset();
    let probes = factor_probe(&ds.images).unwrap();
    for (i, p) in probes.iter().enumerate() {
        let f = probe_to_factors(p.as_ref().unwrap(), 8, 4, 4, 32).unwrap();
        assert_eq!(&f[..], ds.factors_of(i), "image {i}");
    }
}

#[test]
fn informativeness_csv_layout() {
    let report = InformativenessReport {
        chunks: vec![ChunkEstimate {
            chunk: "z_f1".into(),
            estimate: MIEstimate {
                value: 0.5,
                raw: 0.5,
                estimator: KSG_ESTIMATOR,
                k_neighbors: 3,
                n: 100,
                jittered: false,
            },
        }],
        pca_dims: 32,
        pca_explained: 0.9,
    };
    assert_eq!(informativeness_csv(&report), "chunk,mi_nats,estimator,k,n\nz_f1,0.5,ksg1,3,100\n");
}
