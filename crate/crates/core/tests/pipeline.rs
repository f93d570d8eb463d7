mod support;

use std::sync::Arc;

use clipaway_core::adapter::ProjectionAdapter;
use clipaway_core::encoders::mock::MockRegionEncoder;
use clipaway_core::pipeline::{
    dilate_mask, BackendKind, ConditioningMode, ExternalBackend, ImagePromptProjection, MockBackend,
    RemovalOptions, RemovalPipeline, RemovalRequest, ORTHOGONALITY_TOLERANCE,
};
use clipaway_core::encoders::external::ExternalCommand;
use clipaway_core::raster::BinaryMask;
use image::{Rgb, RgbImage};

fn pipeline() -> RemovalPipeline {
    RemovalPipeline::new(
        Arc::new(MockRegionEncoder::with_resolution(3, 64)),
        Arc::new(ProjectionAdapter::new(3)),
        Arc::new(ImagePromptProjection::random(3)),
    )
}

fn scene() -> (RgbImage, BinaryMask) {
    let img = RgbImage::from_fn(72, 56, |x, y| Rgb([(x * 3) as u8, (y * 4) as u8, 90]));
    let mask = BinaryMask::from_fn(72, 56, |x, y| (x as i32 - 30).pow(2) + (y as i32 - 28).pow(2) < 120);
    (img, mask)
}

fn request(kind: BackendKind) -> RemovalRequest {
    let (image, mask) = scene();
    let mut r = RemovalRequest::new(image, mask);
    r.options = RemovalOptions {
        backend: kind,
        steps: 3,
        seed: 21,
        ..Default::default()
    };
    r
}

fn script(dir: &std::path::Path, body: &str) -> ExternalCommand {
    let path = dir.join("backend.sh");
    std::fs::write(&path, format!("#!/bin/sh\nset -e\n{body}\n")).unwrap();
    ExternalCommand::new("sh", vec![path.display().to_string()])
}

#[test]
fn mock_removal_preserves_unmasked_pixels_for_every_backend() {
    let p = pipeline();
    for kind in BackendKind::ALL {
        let req = request(kind);
        let dilated = dilate_mask(&req.mask, req.options.dilation_kernel).unwrap();
        let src = req.image.clone();
        let a = p.remove_object(req.clone(), &MockBackend::new(kind)).unwrap();
        let b = p.remove_object(req, &MockBackend::new(kind)).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.output.dimensions(), src.dimensions());
        for (x, y, px) in src.enumerate_pixels() {
            if !dilated.get(x, y) {
                assert_eq!(a.output.get_pixel(x, y), px);
            }
        }
        let d = &a.diagnostics;
        assert!(d.cos_final_fg.unwrap().abs() <= ORTHOGONALITY_TOLERANCE);
        assert_eq!((d.dilation_kernel, d.dilated_pixels), (5, dilated.count()));
        assert_eq!(d.backend, kind);
    }
}

#[test]
fn unconditioned_run_skips_embeddings() {
    let mut req = request(BackendKind::SdInpaint);
    req.options.conditioning = ConditioningMode::Unconditioned;
    let out = pipeline().remove_object(req, &MockBackend::new(BackendKind::SdInpaint)).unwrap();
    assert!(out.embeddings.is_none());
    assert!(out.diagnostics.cos_final_fg.is_none());
}

#[test]
fn external_backend_round_trips_through_scratch_dir() {
    let dir = tempfile::tempdir().unwrap();
    let backend = ExternalBackend {
        kind: BackendKind::BlendedLatent,
        id: "copy".into(),
        command: script(
            dir.path(),
            "test -s \"$1/request.json\"; test -s \"$1/noise.f32\"; test -s \"$1/tokens.f32\"; cp \"$1/image.png\" \"$1/output.png\"",
        ),
    };
    let req = request(BackendKind::BlendedLatent);
    let src = req.image.clone();
    let out = pipeline().remove_object(req, &backend).unwrap();
    assert_eq!(out.output, src);
    assert_eq!(out.diagnostics.backend_id, "copy");
}

#[test]
fn external_backend_failures_map_to_reasons() {
    let dir = tempfile::tempdir().unwrap();
    let oom = ExternalBackend {
        kind: BackendKind::SdInpaint,
        id: "oom".into(),
        command: script(dir.path(), "echo 'CUDA out of memory' >&2; exit 1"),
    };
    let err = pipeline().remove_object(request(BackendKind::SdInpaint), &oom).unwrap_err();
    assert_eq!(err.reason(), "out_of_memory");

    let missing = ExternalBackend {
        kind: BackendKind::SdInpaint,
        id: "missing".into(),
        command: ExternalCommand::new(dir.path().join("no-such-program"), vec![]),
    };
    let err = pipeline().remove_object(request(BackendKind::SdInpaint), &missing).unwrap_err();
    assert_eq!(err.reason(), "backend_unavailable");
}

#[test]
fn mask_shape_mismatch_is_rejected() {
    let mut req = request(BackendKind::SdInpaint);
    req.mask = BinaryMask::new(10, 10);
    let err = pipeline().remove_object(req, &MockBackend::new(BackendKind::SdInpaint)).unwrap_err();
    assert_eq!(err.reason(), "mask_shape_mismatch");
}

#[test]
fn dilation_matches_brute_force() {
    assert_eq!(support::check_dilation(17, 50, &[1, 3, 5, 7]).unwrap(), 200);
}
