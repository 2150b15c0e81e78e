mod ablate;
mod render;
mod segment;
mod train;

use std::path::Path;

use fieldseg::scene::{
    load_scene, make_scene, make_teacher_features, reduce_teacher_features, save_scene, SceneSpec,
};
use fieldseg::segmentation::{instance_stroke, StrokeSet};
use fieldseg::{Error, Scene};

pub use ablate::{ablate, AblationReport, AblationRow};
pub use segment::{mask_file, score_file};

use crate::args::{Adapter, Command, GenSceneArgs, StrokeArgs, TeacherArgs};
use crate::error::{CliError, CliResult};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenScene(a) => gen_scene(&a),
        Command::Teacher(a) => teacher(&a),
        Command::Train(a) => train::train(&a),
        Command::Render(a) => render::render(&a),
        Command::Stroke(a) => stroke(&a),
        Command::Segment(a) => segment::segment(&a),
        Command::Eval(a) => segment::eval(&a),
        Command::Benchmark(a) => segment::benchmark(&a),
        Command::Ablate(a) => ablate(&a).map(|_| ()),
        Command::Serve(a) => crate::service::serve(&a),
    }
}

pub(crate) fn load(dir: &Path) -> CliResult<Scene> {
    Ok(load_scene(dir)?)
}

fn require_parent(out: &Path) -> CliResult<()> {
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(Error::io(
            parent,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output parent directory does not exist",
            ),
        )
        .into());
    }
    Ok(())
}

fn gen_scene(a: &GenSceneArgs) -> CliResult<()> {
    require_parent(&a.out)?;
    let spec = SceneSpec {
        seed: a.seed,
        n_objects: a.objects,
        camera_count: a.cameras,
        width: a.width,
        height: a.height,
        camera_radius: a.camera_radius,
        elevation_deg: a.elevation,
        arc_deg: a.arc,
        horizontal_fov_deg: a.fov,
        layout_radius: a.layout_radius,
        ..SceneSpec::default()
    };
    let scene = make_scene(&spec)?;
    save_scene(&scene, &a.out)?;
    println!(
        "{} views={} instances={}",
        scene.id,
        scene.views.len(),
        scene.instance_count()
    );
    Ok(())
}

fn teacher(a: &TeacherArgs) -> CliResult<()> {
    let scene = load(&a.scene)?;
    let with = match a.adapter {
        Adapter::Synthetic => make_teacher_features(&scene, a.dim, a.noise, a.seed)?,
    };
    let reduced = reduce_teacher_features(&with, a.pca_dim.unwrap_or(a.dim))?;
    save_scene(&reduced, &a.scene)?;
    println!(
        "{} teacher features dim={}",
        reduced.id,
        reduced.feature_dim().unwrap_or(0)
    );
    Ok(())
}

fn stroke(a: &StrokeArgs) -> CliResult<()> {
    require_parent(&a.out)?;
    let scene = load(&a.scene)?;
    if a.instance == 0 {
        return Err(CliError::usage("--instance must be at least 1"));
    }
    let set = StrokeSet {
        strokes: vec![instance_stroke(&scene, a.view, a.instance, a.radius)?],
    };
    set.write(&a.out)?;
    Ok(())
}
