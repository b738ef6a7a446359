use image::{Rgba, RgbaImage};
use pigment_core::color::Rgb;
use pigment_core::palette::{ContactOutcome, PaletteState, Point};
use pigment_gateway::project::{
    from_archive, to_archive, Layer, Project, ProjectError, ProjectStore,
};
use pigment_gateway::protocol::AxisSpec;

fn layer(id: &str, seed: u8, visible: bool) -> Layer {
    let raster = RgbaImage::from_fn(16, 12, |x, y| {
        Rgba([
            seed.wrapping_mul(x as u8),
            y as u8 * 9,
            seed,
            (x * 16) as u8,
        ])
    });
    Layer {
        id: id.into(),
        name: format!("layer {id}"),
        visible,
        raster,
    }
}

fn rich_project() -> Project {
    let mut palette = PaletteState::new();
    let a = palette
        .add_node("a cat", Rgb([255, 0, 0]), Point::new(0.0, 0.0), 40.0)
        .unwrap();
    let b = palette
        .add_node("a dog", Rgb([0, 0, 255]), Point::new(200.0, 0.0), 40.0)
        .unwrap();
    let c = palette
        .add_node(
            "impressionism",
            Rgb([0, 200, 0]),
            Point::new(300.0, 300.0),
            40.0,
        )
        .unwrap();
    palette
        .add_node("lonely", Rgb([9, 9, 9]), Point::new(-300.0, 0.0), 25.0)
        .unwrap();
    assert!(matches!(
        palette.contact(b, Point::new(60.0, 0.0)).unwrap(),
        ContactOutcome::Paired(_)
    ));
    assert!(matches!(
        palette.contact(c, Point::new(30.0, 20.0)).unwrap(),
        ContactOutcome::Joined(_)
    ));
    assert_eq!(palette.groups()[0].members, vec![a, b, c]);
    let mut project = Project::empty("sketch");
    project.layers = vec![
        layer("base", 3, true),
        layer("mid", 7, false),
        layer("top", 11, true),
    ];
    project.palette = palette;
    project.axes = vec![AxisSpec {
        id: "mood".into(),
        end_a: "joyful".into(),
        end_b: "gloomy".into(),
        color_a: Rgb([255, 255, 0]),
        color_b: Rgb([0, 0, 64]),
        weight: -0.25,
    }];
    project.config.steps = 30;
    project.config.overcoat = 35.0;
    project
}

fn archive_with_manifest(manifest: &str) -> Vec<u8> {
    let mut builder = tar::Builder::new(Vec::new());
    let mut header = tar::Header::new_ustar();
    header.set_size(manifest.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    builder
        .append_data(&mut header, "manifest.json", manifest.as_bytes())
        .unwrap();
    builder.into_inner().unwrap()
}

#[test]
fn empty_project_round_trips() {
    let p = Project::empty("blank");
    assert_eq!(from_archive(&to_archive(&p).unwrap()).unwrap(), p);
}

#[test]
fn layers_and_triple_group_round_trip() {
    let p = rich_project();
    let bytes = to_archive(&p).unwrap();
    assert_eq!(from_archive(&bytes).unwrap(), p);
    assert_eq!(to_archive(&p).unwrap(), bytes, "archives are deterministic");
}

#[test]
fn corrupted_archives_are_rejected() {
    let bytes = to_archive(&rich_project()).unwrap();
    assert!(matches!(
        from_archive(&bytes[..bytes.len() / 3]),
        Err(ProjectError::Corrupt(_))
    ));
    assert!(matches!(
        from_archive(b"not a tarball at all"),
        Err(ProjectError::Corrupt(_))
    ));
    assert!(matches!(
        from_archive(&archive_with_manifest("{oops")),
        Err(ProjectError::Corrupt(_))
    ));
    let missing_layer = r#"{"schema_version":1,"name":"x","layers":[{"id":"a","name":"a","visible":true,"file":"layers/a.png"}],
        "palette":{"nodes":[],"groups":[],"next_node":0,"next_group":0},"axes":[],"config":{}}"#;
    assert!(matches!(
        from_archive(&archive_with_manifest(missing_layer)),
        Err(ProjectError::Corrupt(_))
    ));
    let bad_group = r#"{"schema_version":1,"name":"x","layers":[],
        "palette":{"nodes":[],"groups":[{"id":0,"members":[4]}],"next_node":0,"next_group":1},"axes":[],"config":{}}"#;
    assert!(matches!(
        from_archive(&archive_with_manifest(bad_group)),
        Err(ProjectError::Corrupt(_))
    ));
}

#[test]
fn version_mismatch_reports_migration() {
    let future = r#"{"schema_version":2,"whatever":"new layout"}"#;
    match from_archive(&archive_with_manifest(future)) {
        Err(ProjectError::Migration {
            found: 2,
            supported: 1,
        }) => {}
        other => panic!("expected migration error, got {other:?}"),
    }
    assert!(matches!(
        from_archive(&archive_with_manifest(r#"{"name":"x"}"#)),
        Err(ProjectError::Corrupt(_))
    ));
}

#[test]
fn store_saves_lists_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProjectStore::open(dir.path()).unwrap();
    let p = rich_project();
    let path = store.save("sketch-1", &p).unwrap();
    assert!(path.ends_with("sketch-1.pigment"));
    store.save("other", &Project::empty("other")).unwrap();
    assert_eq!(
        store.list().unwrap(),
        vec!["other".to_string(), "sketch-1".to_string()]
    );
    assert_eq!(store.load("sketch-1").unwrap(), p);
    assert!(matches!(
        store.load("missing"),
        Err(ProjectError::NotFound(_))
    ));
    assert!(matches!(
        store.save("../escape", &p),
        Err(ProjectError::InvalidId(_))
    ));
    std::fs::write(store.path_of("broken").unwrap(), b"garbage").unwrap();
    assert!(matches!(
        store.load("broken"),
        Err(ProjectError::Corrupt(_))
    ));
}

#[test]
fn store_handles_concurrent_saves() {
    let dir = tempfile::tempdir().unwrap();
    let store = std::sync::Arc::new(ProjectStore::open(dir.path()).unwrap());
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let store = store.clone();
            std::thread::spawn(move || {
                let mut p = rich_project();
                p.config.steps = 10 + i;
                store.save("shared", &p).unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let loaded = store.load("shared").unwrap();
    assert!((10..18).contains(&loaded.config.steps));
}
