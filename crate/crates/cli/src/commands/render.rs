use std::collections::BTreeSet;
use std::fs;

use fieldseg::features::write_feat;
use fieldseg::model::{read_checkpoint, render_view, DirectionInput, RenderRequest};
use fieldseg::scene::select_source_views;
use fieldseg::training::RENDER_CHUNK;
use fieldseg::Error;

use super::load;
use crate::args::{Output, RenderArgs};
use crate::error::CliResult;
use crate::preview::{encode_rgb_png, feature_pca_rgb, read_camera_file, write_bytes};

pub fn render(a: &RenderArgs) -> CliResult<()> {
    let ck = read_checkpoint(&a.ckpt)?;
    let scene = load(&a.scene)?;
    let camera = match (a.view, &a.pose) {
        (Some(v), _) => scene
            .views
            .get(v)
            .ok_or_else(|| Error::NotFound(format!("view {v}")))?
            .camera
            .clone(),
        (None, Some(p)) => read_camera_file(p, scene.near, scene.far)?,
        (None, None) => unreachable!("clap requires --view or --pose"),
    };
    let sources = select_source_views(&scene, &camera, ck.model.config.sources)?;
    let camera = match (a.width, a.height) {
        (Some(w), Some(h)) if w > 0 && h > 0 => camera.resized(w, h),
        (Some(_), Some(_)) => return Err(Error::domain("render size must be non-zero").into()),
        _ => camera,
    };
    let outputs: BTreeSet<Output> = a.outputs.iter().copied().collect();
    let features = outputs.contains(&Output::Features) || outputs.contains(&Output::FeaturePca);
    let req = RenderRequest {
        camera,
        sources,
        features,
        chunk: RENDER_CHUNK,
        directions: DirectionInput::Computed,
    };
    let r = render_view(&ck.model, &scene, &req)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for o in &outputs {
        match o {
            Output::Rgb => write_bytes(
                &a.out_dir.join("rgb.png"),
                &encode_rgb_png(r.width, r.height, &r.rgb),
            )?,
            Output::Features => write_feat(
                r.feat.as_ref().expect("features rendered"),
                &a.out_dir.join("features.feat"),
            )?,
            Output::FeaturePca => {
                let f = r.feat.as_ref().expect("features rendered");
                write_bytes(
                    &a.out_dir.join("feature_pca.png"),
                    &encode_rgb_png(r.width, r.height, &feature_pca_rgb(f)),
                )?
            }
        }
    }
    println!(
        "rendered {}x{} degenerate_rays={}",
        r.width, r.height, r.degenerate_rays
    );
    Ok(())
}
