use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelImage, PosedImage, RgbImage, Scene};
use crate::error::{Error, Result};
use crate::features::{read_feat, read_pca, write_feat, write_pca, Provenance};
use crate::geometry::Camera;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub camera: CameraEntry,
}

/// Contents of `scene.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub id: String,
    pub near: f64,
    pub far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<String>,
    pub views: Vec<ViewEntry>,
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    scene.validate()?;
    mkdir(&dir.join("images"))?;
    if scene.instance_masks.is_some() {
        mkdir(&dir.join("masks"))?;
    }
    if scene.teacher_features.is_some() {
        mkdir(&dir.join("features"))?;
    }
    let mut views = Vec::with_capacity(scene.views.len());
    for (i, v) in scene.views.iter().enumerate() {
        let image = format!("images/{i:03}.png");
        let path = dir.join(&image);
        image::RgbImage::from_raw(v.rgb.width as u32, v.rgb.height as u32, v.rgb.to_bytes())
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        let mask = match &scene.instance_masks {
            Some(ms) => {
                let name = format!("masks/{i:03}.png");
                let path = dir.join(&name);
                let m = &ms[i];
                image::GrayImage::from_raw(m.width as u32, m.height as u32, m.data.clone())
                    .expect("buffer matches dimensions")
                    .save(&path)
                    .map_err(|e| Error::format(&path, e.to_string()))?;
                Some(name)
            }
            None => None,
        };
        let features = match &scene.teacher_features {
            Some(fs) => {
                let name = format!("features/{i:03}.feat");
                write_feat(&fs[i], &dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        let c = &v.camera;
        views.push(ViewEntry {
            image,
            mask,
            features,
            camera: CameraEntry {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                world_to_camera: c.world_to_camera.to_vec(),
            },
        });
    }
    let pca = match &scene.pca {
        Some(p) => {
            write_pca(p, &dir.join("pca.gsnp"))?;
            Some("pca.gsnp".to_string())
        }
        None => None,
    };
    let file = SceneFile {
        id: scene.id.clone(),
        near: scene.near,
        far: scene.far,
        pca,
        views,
    };
    let path = dir.join("scene.json");
    let text = serde_json::to_string_pretty(&file).expect("scene file serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_scene_file(dir: &Path) -> Result<SceneFile> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    let file = read_scene_file(dir)?;
    let json_path = dir.join("scene.json");
    let mut views = Vec::with_capacity(file.views.len());
    let mut masks = Vec::new();
    let mut feats = Vec::new();
    let with_masks = file.views.iter().all(|v| v.mask.is_some());
    let with_feats = file.views.iter().all(|v| v.features.is_some());
    for entry in &file.views {
        let c = &entry.camera;
        let w2c: [f64; 16] = c
            .world_to_camera
            .as_slice()
            .try_into()
            .map_err(|_| Error::format(&json_path, "world_to_camera needs 16 numbers"))?;
        let camera = Camera::new(
            c.fx, c.fy, c.cx, c.cy, c.width, c.height, w2c, file.near, file.far,
        )
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
        let img_path: PathBuf = dir.join(&entry.image);
        let img = read_png(&img_path)?.to_rgb8();
        if img.width() as usize != c.width || img.height() as usize != c.height {
            return Err(Error::format(&img_path, "image size does not match camera"));
        }
        let rgb = RgbImage::from_bytes(c.width, c.height, img.as_raw());
        if with_masks {
            let p = dir.join(entry.mask.as_ref().unwrap());
            let m = read_png(&p)?.to_luma8();
            if m.width() as usize != c.width || m.height() as usize != c.height {
                return Err(Error::format(&p, "mask size does not match camera"));
            }
            masks.push(LabelImage {
                width: c.width,
                height: c.height,
                data: m.into_raw(),
            });
        }
        if with_feats {
            let p = dir.join(entry.features.as_ref().unwrap());
            let f = read_feat(&p, Provenance::Teacher)?;
            if f.width != c.width || f.height != c.height {
                return Err(Error::format(&p, "feature size does not match camera"));
            }
            feats.push(f);
        }
        views.push(PosedImage { camera, rgb });
    }
    let pca = match &file.pca {
        Some(name) => Some(read_pca(&dir.join(name))?),
        None => None,
    };
    let scene = Scene {
        id: file.id,
        views,
        near: file.near,
        far: file.far,
        instance_masks: with_masks.then_some(masks),
        teacher_features: with_feats.then_some(feats),
        pca,
    };
    scene
        .validate()
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    Ok(scene)
}
