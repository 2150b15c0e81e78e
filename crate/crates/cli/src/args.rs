use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fieldseg::scene::SceneSpec;
use fieldseg::segmentation::{BenchmarkSpec, DEFAULT_K};

#[derive(Parser, Debug)]
#[command(
    name = "fieldseg",
    version,
    about = "Feature radiance fields for stroke-based multi-view segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic posed scene with instance masks.
    GenScene(GenSceneArgs),
    /// Attach teacher features to a scene directory.
    Teacher(TeacherArgs),
    /// Train stage 1 (photometric) or stage 2 (feature distillation).
    Train(TrainArgs),
    /// Render colour and feature images for a view or pose.
    Render(RenderArgs),
    /// Write a single synthetic stroke inside one instance.
    Stroke(StrokeArgs),
    /// Segment views from a stroke file.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Run the single-stroke segmentation benchmark on one scene.
    Benchmark(BenchmarkArgs),
    /// Compare the model against an architectural alternative.
    Ablate(AblateArgs),
    /// Serve rendering and segmentation over HTTP.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenSceneArgs {
    /// Output scene directory; its parent must exist.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SceneSpec::default().n_objects)]
    pub objects: usize,
    #[arg(long, default_value_t = SceneSpec::default().camera_count)]
    pub cameras: usize,
    #[arg(long, default_value_t = SceneSpec::default().width)]
    pub width: usize,
    #[arg(long, default_value_t = SceneSpec::default().height)]
    pub height: usize,
    /// Distance of the cameras from the scene centre.
    #[arg(long, default_value_t = SceneSpec::default().camera_radius)]
    pub camera_radius: f64,
    /// Camera elevation in degrees.
    #[arg(long, default_value_t = SceneSpec::default().elevation_deg)]
    pub elevation: f64,
    /// Angular span of the camera arc in degrees.
    #[arg(long, default_value_t = SceneSpec::default().arc_deg)]
    pub arc: f64,
    /// Horizontal field of view in degrees.
    #[arg(long, default_value_t = SceneSpec::default().horizontal_fov_deg)]
    pub fov: f64,
    #[arg(long, default_value_t = SceneSpec::default().layout_radius)]
    pub layout_radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Adapter {
    /// Per-instance embeddings plus Gaussian noise.
    Synthetic,
}

#[derive(Args, Debug)]
pub struct TeacherArgs {
    /// Scene directory to update in place.
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value_t = Adapter::Synthetic)]
    pub adapter: Adapter,
    /// Native teacher dimension.
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Dimension after the per-scene PCA reduction [default: --dim].
    #[arg(long)]
    pub pca_dim: Option<usize>,
    /// Standard deviation of the noise vector.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReadoutArg {
    RayTransformer,
    Volumetric,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Training scene directories.
    #[arg(long, num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Iterations for this stage [default: profile].
    #[arg(long)]
    pub iters: Option<usize>,
    /// [default: profile]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Rays per iteration [default: profile].
    #[arg(long)]
    pub rays: Option<usize>,
    /// Stage-2 rays per iteration [default: profile].
    #[arg(long)]
    pub stage2_rays: Option<usize>,
    /// Samples per ray, stage 1 only [default: profile].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Source views per target, stage 1 only [default: profile].
    #[arg(long)]
    pub sources: Option<usize>,
    /// View/ray transformer blocks, stage 1 only [default: profile].
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Feature head blocks, stage 1 only [default: profile].
    #[arg(long)]
    pub stage2_blocks: Option<usize>,
    /// Token width, stage 1 only [default: profile].
    #[arg(long)]
    pub token_dim: Option<usize>,
    /// Distilled feature dimension, stage 1 only [default: profile].
    #[arg(long)]
    pub feat_dim: Option<usize>,
    /// Feed viewing directions into the backbone, stage 1 only.
    #[arg(long)]
    pub dir_in_source_tokens: bool,
    /// Colour readout, stage 1 only [default: profile].
    #[arg(long, value_enum)]
    pub readout: Option<ReadoutArg>,
    /// Stage-1 learning rate [default: profile].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stage-2 feature head learning rate [default: profile].
    #[arg(long)]
    pub stage2_lr: Option<f64>,
    /// Stage-2 backbone learning rate as a fraction of --stage2-lr [default: profile].
    #[arg(long)]
    pub backbone_lr_factor: Option<f64>,
    /// [default: profile]
    #[arg(long)]
    pub lambda_rgb: Option<f64>,
    /// [default: profile]
    #[arg(long)]
    pub lambda_feat: Option<f64>,
    /// Disable random scene motion and colour permutation.
    #[arg(long)]
    pub no_augment: bool,
    /// Place samples uniformly instead of with stratified jitter.
    #[arg(long)]
    pub no_stratified: bool,
    /// Scene scored at the end of training.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub held_out_view: usize,
    /// Also score the held-out view every N iterations; 0 scores only at the end.
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Training log as JSON lines [default: <out>.log.jsonl].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Print a progress line every N iterations; 0 is silent.
    #[arg(long, default_value_t = 100)]
    pub progress: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, ValueEnum)]
pub enum Output {
    Rgb,
    Features,
    FeaturePca,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Scene view to render; it never serves as its own source.
    #[arg(long, conflicts_with = "pose", required_unless_present = "pose")]
    pub view: Option<usize>,
    /// Camera file in the scene.json camera format.
    #[arg(long)]
    pub pose: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "rgb")]
    pub outputs: Vec<Output>,
    /// Output width [default: camera width].
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
    /// Output height [default: camera height].
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct StrokeArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long)]
    pub instance: u8,
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SegmentArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Stage-2 checkpoint; features are rendered per view.
    #[arg(
        long,
        conflicts_with = "feat_dir",
        required_unless_present = "feat_dir"
    )]
    pub ckpt: Option<PathBuf>,
    /// Directory of precomputed `NNN.feat` images, one per view.
    #[arg(long)]
    pub feat_dir: Option<PathBuf>,
    #[arg(long)]
    pub strokes: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// Feature distance threshold shared by every view.
    #[arg(long)]
    pub tau: f64,
    /// Views to segment [default: all].
    #[arg(long, value_delimiter = ',')]
    pub views: Option<Vec<usize>>,
    /// k-means seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of `view_NNN.png` masks, with optional `view_NNN.score` maps.
    #[arg(long)]
    pub masks: PathBuf,
    /// Directory of ground-truth `view_NNN.png` masks.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    pub gt: Option<PathBuf>,
    /// Scene whose instance masks provide the ground truth.
    #[arg(long, requires = "instance")]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub instance: Option<u8>,
    /// Metrics report [default: <masks>/metrics.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BenchmarkOpts {
    #[arg(long, default_value_t = BenchmarkSpec::default().stroke_view)]
    pub stroke_view: usize,
    #[arg(long, default_value_t = BenchmarkSpec::default().brush_radius)]
    pub radius: f64,
    #[arg(long, default_value_t = BenchmarkSpec::default().k)]
    pub k: usize,
    /// k-means seed.
    #[arg(long = "kmeans-seed", default_value_t = BenchmarkSpec::default().seed)]
    pub kmeans_seed: u64,
    /// Smallest visible instance area in the stroked view.
    #[arg(long, default_value_t = BenchmarkSpec::default().min_pixels)]
    pub min_pixels: usize,
}

impl BenchmarkOpts {
    pub fn spec(&self) -> BenchmarkSpec {
        BenchmarkSpec {
            stroke_view: self.stroke_view,
            brush_radius: self.radius,
            k: self.k,
            seed: self.kmeans_seed,
            min_pixels: self.min_pixels,
        }
    }
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[command(flatten)]
    pub opts: BenchmarkOpts,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Backbone without vs with viewing directions in the source tokens.
    ViewDir,
    /// Ray-transformer colour readout vs volumetric compositing.
    VolRender,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(value_enum)]
    pub name: Ablation,
    #[arg(long, num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    /// Benchmark scene, unseen during training.
    #[arg(long)]
    pub held_out: PathBuf,
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// Directory for the variant checkpoints.
    #[arg(long)]
    pub work: PathBuf,
    /// Report file.
    #[arg(long)]
    pub out: PathBuf,
    /// Existing stage-2 checkpoint for the unmodified model, trained with the same profile.
    #[arg(long)]
    pub gsn_checkpoint: Option<PathBuf>,
    /// [default: profile]
    #[arg(long)]
    pub stage1_iters: Option<usize>,
    /// [default: profile]
    #[arg(long)]
    pub stage2_iters: Option<usize>,
    /// [default: profile]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub bench: BenchmarkOpts,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory holding `scenes/<id>/` and `checkpoints/<id>.gsnc`.
    #[arg(long, env = "FIELDSEG_DATA_ROOT", required_unless_present = "check")]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Largest accepted render width or height.
    #[arg(long, default_value_t = 256)]
    pub max_resolution: usize,
    /// Rendered views kept per session.
    #[arg(long, default_value_t = 64)]
    pub cache_entries: usize,
    /// Probe every endpoint against a generated micro-scene, then exit.
    #[arg(long)]
    pub check: bool,
}
