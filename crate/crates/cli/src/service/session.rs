use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::num::NonZeroUsize;
use std::sync::Arc;
use std::time::SystemTime;

use fieldseg::geometry::Camera;
use fieldseg::model::{render_view, Checkpoint, DirectionInput, RenderRequest, Rendered};
use fieldseg::scene::select_source_views;
use fieldseg::segmentation::{
    cluster_strokes, encode_mask_png, masks_from_centers, ClusterCenters, Confusion, StrokeSet,
    SEGMENT_CHUNK,
};
use fieldseg::{Error, FeatureImage, Result, Scene};
use lru::LruCache;

/// Exact camera identity: intrinsics, pose, clip range and resolution bits.
pub type PoseKey = Vec<u64>;

pub fn pose_key(c: &Camera) -> PoseKey {
    let mut k: Vec<u64> = [c.fx, c.fy, c.cx, c.cy, c.near, c.far]
        .iter()
        .chain(c.world_to_camera.iter())
        .map(|v| v.to_bits())
        .collect();
    k.push(c.width as u64);
    k.push(c.height as u64);
    k
}

/// Work done while serving one request.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    /// Full-image forward passes executed.
    pub renders: usize,
    /// Whether k-means ran (false when the centres came from the cache).
    pub clustered: bool,
}

pub struct RenderOutput {
    pub rendered: Arc<Rendered>,
    pub cached: bool,
}

pub struct ViewMask {
    pub view_id: usize,
    pub png: Vec<u8>,
    pub selected: usize,
}

pub struct ViewIou {
    pub view_id: usize,
    pub iou: f64,
}

pub struct SegmentOutput {
    pub masks: Vec<ViewMask>,
    /// Instance under most stroked pixels and per-view IoU against it, when
    /// the scene has instance masks.
    pub metrics: Option<(u8, Vec<ViewIou>)>,
}

pub struct Session {
    pub id: String,
    pub scene_id: String,
    pub checkpoint_id: String,
    pub scene: Arc<Scene>,
    pub checkpoint: Arc<Checkpoint>,
    pub created: SystemTime,
    cache: LruCache<PoseKey, Arc<Rendered>>,
    centers: Option<(u64, (String, usize, u64), ClusterCenters)>,
}

impl Session {
    pub fn new(
        id: String,
        scene_id: String,
        checkpoint_id: String,
        scene: Arc<Scene>,
        checkpoint: Arc<Checkpoint>,
        cache_entries: usize,
    ) -> Self {
        Self {
            id,
            scene_id,
            checkpoint_id,
            scene,
            checkpoint,
            created: SystemTime::now(),
            cache: LruCache::new(NonZeroUsize::new(cache_entries.max(1)).expect("non-zero")),
            centers: None,
        }
    }

    pub fn cached_views(&self) -> usize {
        self.cache.len()
    }

    pub fn view_camera(&self, view: usize) -> Result<Camera> {
        Ok(self
            .scene
            .views
            .get(view)
            .ok_or_else(|| Error::NotFound(format!("view {view}")))?
            .camera
            .clone())
    }

    /// Renders `camera` (features too when the checkpoint has a feature
    /// head) or returns the cached result for the identical camera.
    pub fn render(&mut self, camera: &Camera, stats: &mut Stats) -> Result<RenderOutput> {
        let key = pose_key(camera);
        if let Some(r) = self.cache.get(&key) {
            return Ok(RenderOutput {
                rendered: r.clone(),
                cached: true,
            });
        }
        let model = &self.checkpoint.model;
        let req = RenderRequest {
            camera: camera.clone(),
            sources: select_source_views(&self.scene, camera, model.config.sources)?,
            features: model.has_feature_head(),
            chunk: SEGMENT_CHUNK,
            directions: DirectionInput::Computed,
        };
        let r = Arc::new(render_view(model, &self.scene, &req)?);
        stats.renders += 1;
        self.cache.put(key, r.clone());
        Ok(RenderOutput {
            rendered: r,
            cached: false,
        })
    }

    fn view_features(&mut self, view: usize, stats: &mut Stats) -> Result<FeatureImage> {
        let camera = self.view_camera(view)?;
        let out = self.render(&camera, stats)?;
        Ok(out
            .rendered
            .feat
            .clone()
            .expect("stage-2 renders carry features"))
    }

    pub fn segment(
        &mut self,
        strokes: &StrokeSet,
        k: usize,
        tau: f64,
        views: &[usize],
        seed: u64,
        stats: &mut Stats,
    ) -> Result<SegmentOutput> {
        if tau.is_nan() || tau < 0.0 {
            return Err(Error::domain(format!(
                "threshold must be non-negative, got {tau}"
            )));
        }
        if !self.checkpoint.model.has_feature_head() {
            return Err(Error::Capability(
                "segmentation needs a stage-2 checkpoint".into(),
            ));
        }
        let n = self.scene.views.len();
        if let Some(v) = strokes
            .views()
            .into_iter()
            .chain(views.iter().copied())
            .find(|v| *v >= n)
        {
            return Err(Error::NotFound(format!("view {v}")));
        }
        let mut feats = BTreeMap::new();
        for v in strokes.views().into_iter().chain(views.iter().copied()) {
            if let std::collections::btree_map::Entry::Vacant(e) = feats.entry(v) {
                let f = self.view_features(v, stats)?;
                e.insert(f);
            }
        }
        let key = (strokes.to_json(), k, seed);
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        let hash = h.finish();
        let centers = match &self.centers {
            Some((hh, kk, c)) if *hh == hash && *kk == key => c.clone(),
            _ => {
                let c = cluster_strokes(strokes, &feats, k, seed)?;
                stats.clustered = true;
                self.centers = Some((hash, key, c.clone()));
                c
            }
        };
        let segs = masks_from_centers(&centers, &feats, views, tau)?;
        let metrics = self.stroke_instance(strokes)?.map(|id| {
            let masks = self
                .scene
                .instance_masks
                .as_ref()
                .expect("instance found in masks");
            let ious = segs
                .iter()
                .map(|s| ViewIou {
                    view_id: s.view_id,
                    iou: Confusion::of(&s.mask.data, &masks[s.view_id].mask_of(id)).iou(),
                })
                .collect();
            (id, ious)
        });
        let masks = segs
            .iter()
            .map(|s| ViewMask {
                view_id: s.view_id,
                png: encode_mask_png(&s.mask),
                selected: s.mask.count(),
            })
            .collect();
        Ok(SegmentOutput { masks, metrics })
    }

    /// The non-background instance covering most stroked pixels.
    fn stroke_instance(&self, strokes: &StrokeSet) -> Result<Option<u8>> {
        let Some(masks) = &self.scene.instance_masks else {
            return Ok(None);
        };
        let pixels = strokes.rasterize(|v| masks.get(v).map(|m| (m.width, m.height)))?;
        let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
        for (v, idx) in pixels {
            for i in idx {
                let l = masks[v].data[i];
                if l != 0 {
                    *counts.entry(l).or_default() += 1;
                }
            }
        }
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(id, _)| *id);
        Ok(best)
    }
}
