//! Regenerates the bundled synthetic scene at data/synthetic_scene.pts.

use granet::pipeline::synthetic_scene;
use granet::pointcloud::write_labels;

fn main() {
    let cloud = synthetic_scene(42);
    let labels = cloud.labels().expect("scene is labeled");
    // write_labels appends the predicted class; here prediction = truth,
    // so strip the final column to keep the canonical 6-field layout
    let tmp = std::env::temp_dir().join("granet_scene_tmp.pts");
    write_labels(&cloud, &labels, &tmp).expect("write");
    let text = std::fs::read_to_string(&tmp).expect("read back");
    let stripped: String = text
        .lines()
        .map(|l| {
            let (head, _) = l.rsplit_once(' ').expect("line has fields");
            format!("{head}\n")
        })
        .collect();
    let out = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/synthetic_scene.pts");
    std::fs::create_dir_all(out.parent().unwrap()).expect("mkdir");
    std::fs::write(&out, stripped).expect("write scene");
    println!("wrote {}", out.display());
}
