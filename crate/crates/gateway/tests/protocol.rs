use pigment_core::backend::ToyDenoiserConfig;
use pigment_core::session::BackendSet;
use pigment_gateway::protocol::{Fault, StateSnapshot};
use pigment_gateway::{Envelope, Gateway};
use serde_json::{json, Value};

struct Client {
    gateway: Gateway,
    seq: u64,
    session: Option<String>,
    last_out: u64,
}

impl Client {
    fn new() -> Self {
        let backends = BackendSet::toy(ToyDenoiserConfig::default(), 4).unwrap();
        Self {
            gateway: Gateway::new(backends, None),
            seq: 1,
            session: None,
            last_out: 0,
        }
    }

    fn check_out(&mut self, envs: &[Envelope]) {
        for e in envs {
            assert_eq!(e.seq, self.last_out + 1, "outbound seq is gap-free");
            self.last_out = e.seq;
        }
    }

    fn send(&mut self, kind: &str, payload: Value) -> Vec<Envelope> {
        let env = Envelope::new(kind, self.session.clone(), self.seq, payload);
        self.seq += 1;
        let out = self.gateway.handle_message(env).unwrap();
        self.check_out(&out);
        out
    }

    fn ok(&mut self, kind: &str, payload: Value) -> Value {
        let out = self.send(kind, payload);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].kind, "ack", "{kind}: {:?}", out[0].payload);
        assert_eq!(out[0].payload["ref_seq"], json!(self.seq - 1));
        out[0].payload.clone()
    }

    fn err(&mut self, kind: &str, payload: Value) -> String {
        let out = self.send(kind, payload);
        assert_eq!(out[0].kind, "error", "{kind} should fail");
        out[0].payload["code"].as_str().unwrap().to_string()
    }

    fn open(&mut self) {
        let ack = self.ok("open", json!({}));
        self.session = Some(ack["result"]["session_id"].as_str().unwrap().to_string());
    }

    fn mixed_palette(&mut self) {
        self.ok(
            "add_prompt",
            json!({"text": "a cat", "color": "#ff0000", "center": [0, 0]}),
        );
        self.ok(
            "add_prompt",
            json!({"text": "a dog", "color": "#0000ff", "center": [100, 0]}),
        );
        let moved = self.ok("move_node", json!({"node_id": 1, "center": [40, 0]}));
        assert_eq!(moved["result"]["outcome"], json!({"paired": 0}));
        let sel = self.ok("select", json!({"target": {"group": 0}, "point": [10, 7]}));
        assert_eq!(sel["result"]["weights"], json!([0.75, 0.25]));
    }

    fn pump_all(&mut self) -> Vec<Envelope> {
        let mut out = Vec::new();
        while self.gateway.is_busy() {
            let envs = self.gateway.pump();
            self.check_out(&envs);
            out.extend(envs);
        }
        out
    }

    fn state(&mut self) -> StateSnapshot {
        serde_json::from_value(self.ok("get_state", json!({}))["result"].clone()).unwrap()
    }
}

#[test]
fn ping_gets_pong() {
    let mut c = Client::new();
    let out = c.send("ping", json!({}));
    assert_eq!(out[0].kind, "pong");
}

#[test]
fn routing_errors_carry_codes() {
    let mut c = Client::new();
    assert_eq!(c.err("paint", json!({})), "unknown_type");
    assert_eq!(c.err("start", json!({"stencil": "full"})), "no_session");
    c.open();
    assert_eq!(c.err("add_prompt", json!({"text": 3})), "malformed");
    assert_eq!(c.err("rollback", json!({"step": -1})), "bad_step");
    assert_eq!(c.err("start", json!({"stencil": "full"})), "bad_state");
    assert_eq!(
        c.err("move_node", json!({"node_id": 9, "center": [0, 0]})),
        "not_found"
    );
    c.mixed_palette();
    assert_eq!(
        c.err("start", json!({"stencil": {"rects": []}})),
        "empty_stencil"
    );
    assert_eq!(c.err("intervene", json!({})), "bad_state");
    assert_eq!(c.err("set_canvas", json!({"png": "aGVsbG8="})), "malformed");
    assert_eq!(c.err("add_axis", json!({"id": "x", "end_a": "a", "end_b": "b", "color_a": "#000000", "color_b": "#ffffff", "weight": 2.0})), "bad_weights");
    assert_eq!(c.err("save_project", json!({})), "project");
}

#[test]
fn out_of_order_seq_is_a_fault() {
    let mut c = Client::new();
    c.send("ping", json!({}));
    let env = Envelope::new("ping", None, 5, json!({}));
    assert_eq!(
        c.gateway.handle_message(env),
        Err(Fault::Sequence {
            expected: 2,
            got: 5
        })
    );
}

#[test]
fn single_step_rounds_stream_one_frame_per_resume() {
    let mut c = Client::new();
    c.open();
    c.mixed_palette();
    let ack = c.ok(
        "start",
        json!({"stencil": "full", "config": {"steps": 8, "single_stroke": 1}}),
    );
    assert_eq!(ack["result"]["status"], "running");
    let mut frames = Vec::new();
    loop {
        let out = c.pump_all();
        assert_eq!(out[0].kind, "frame");
        frames.push(out[0].payload["step"].as_u64().unwrap());
        if out[1].kind == "done" {
            break;
        }
        assert_eq!(out[1].kind, "status");
        assert_eq!(out[1].payload["status"], "stopped");
        c.ok("resume", json!({}));
    }
    assert_eq!(frames, (0..8).collect::<Vec<_>>());
    let state = c.state();
    let generation = state.generation.unwrap();
    assert_eq!((generation.cursor, generation.path.len()), (8, 8));
}

#[test]
fn acks_hash_the_resulting_state() {
    let mut c = Client::new();
    c.open();
    let h1 = c.ok(
        "add_prompt",
        json!({"text": "a cat", "color": "#ff0000", "center": [0, 0]}),
    )["state_hash"]
        .clone();
    let h2 = c.ok("get_state", json!({}))["state_hash"].clone();
    assert_eq!(h1, h2);
    let h3 = c.ok("move_node", json!({"node_id": 0, "center": [5, 5]}))["state_hash"].clone();
    assert_ne!(h1, h3);
    assert_eq!(h3.as_str().unwrap().len(), 64);
}

#[test]
fn intervention_rollback_and_undo_over_the_protocol() {
    let mut c = Client::new();
    c.open();
    c.mixed_palette();
    c.ok("add_axis", json!({"id": "mood", "end_a": "joyful", "end_b": "gloomy", "color_a": "#ffff00", "color_b": "#000040"}));
    c.ok(
        "start",
        json!({"stencil": "full", "config": {"steps": 10, "single_stroke": 4}}),
    );
    let out = c.pump_all();
    assert_eq!(out.iter().filter(|e| e.kind == "frame").count(), 4);
    c.ok("intervene", json!({"axis_weights": {"mood": -0.5}}));
    assert_eq!(
        c.err("intervene", json!({"axis_weights": {"nope": 0.1}})),
        "not_found"
    );
    assert_eq!(c.err("rollback", json!({"step": 5})), "bad_step");
    let r = c.ok("rollback", json!({"step": 2}));
    assert_eq!(r["result"]["cursor"], 2);
    c.ok("undo", json!({}));
    c.ok("resume", json!({}));
    let out = c.pump_all();
    let steps: Vec<u64> = out
        .iter()
        .filter(|e| e.kind == "frame")
        .map(|e| e.payload["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4]);
    let mut rounds = 0;
    loop {
        c.ok("resume", json!({}));
        rounds += 1;
        if c.pump_all().last().unwrap().kind == "done" {
            break;
        }
    }
    assert_eq!(rounds, 2);
    let path = c.state().generation.unwrap().path;
    assert_eq!(path.len(), 10);
    assert!(path[..1]
        .iter()
        .all(|p| p.axis_weights == vec![("mood".to_string(), 0.0)]));
    assert!(path[1..]
        .iter()
        .all(|p| p.axis_weights == vec![("mood".to_string(), -0.5)]));
    assert_ne!(path[0].display_color, path[1].display_color);
}

#[test]
fn stencil_png_and_canvas_are_accepted() {
    use base64::Engine;
    let mut c = Client::new();
    c.open();
    c.ok(
        "add_prompt",
        json!({"text": "a cat", "color": "#ff0000", "center": [0, 0]}),
    );
    c.ok("select", json!({"target": {"node": 0}}));
    let canvas = image::RgbaImage::from_pixel(32, 32, image::Rgba([90, 10, 10, 255]));
    let png = pigment_gateway::wire::encode_png(&canvas);
    c.ok("set_canvas", json!({"png": png}));
    let mut mask = image::GrayImage::new(32, 32);
    mask.put_pixel(3, 3, image::Luma([255]));
    let mask_png = pigment_gateway::wire::encode_mask_png(&mask);
    assert!(base64::engine::general_purpose::STANDARD
        .decode(&mask_png)
        .is_ok());
    c.ok(
        "start",
        json!({"stencil": {"png": mask_png}, "config": {"steps": 3}}),
    );
    let out = c.pump_all();
    let done = out.iter().find(|e| e.kind == "done").unwrap();
    let result =
        pigment_gateway::wire::decode_png(done.payload["image"].as_str().unwrap()).unwrap();
    // only the stenciled pixel is written
    for (x, y, px) in result.enumerate_pixels() {
        if (x, y) != (3, 3) {
            assert_eq!(px, canvas.get_pixel(x, y));
        }
    }
    let wrong = pigment_gateway::wire::encode_png(&image::RgbaImage::new(16, 16));
    assert_eq!(c.err("set_canvas", json!({"png": wrong})), "shape");
}

#[test]
fn close_ends_the_session() {
    let mut c = Client::new();
    c.open();
    c.ok("close", json!({}));
    assert_eq!(c.err("get_state", json!({})), "no_session");
}

#[test]
fn projects_save_and_load_through_the_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let store =
        std::sync::Arc::new(pigment_gateway::project::ProjectStore::open(dir.path()).unwrap());
    let backends = BackendSet::toy(ToyDenoiserConfig::default(), 4).unwrap();
    let mut c = Client::new();
    c.gateway = Gateway::new(backends, Some(store));
    c.open();
    c.mixed_palette();
    c.ok("add_axis", json!({"id": "mood", "end_a": "joyful", "end_b": "gloomy", "color_a": "#ffff00", "color_b": "#000040", "weight": 0.25}));
    let canvas = image::RgbaImage::from_pixel(32, 32, image::Rgba([1, 2, 3, 255]));
    c.ok(
        "set_canvas",
        json!({"png": pigment_gateway::wire::encode_png(&canvas)}),
    );
    c.ok("save_project", json!({"project_id": "demo"}));
    let before = c.state();

    c.ok("close", json!({}));
    c.session = None;
    c.open();
    let fresh = c.state();
    assert_ne!(fresh.canvas_sha256, before.canvas_sha256);
    c.ok("load_project", json!({"project_id": "demo"}));
    let after = c.state();
    assert_eq!(after.palette, before.palette);
    assert_eq!(after.axes, before.axes);
    assert_eq!(after.canvas_sha256, before.canvas_sha256);
    assert_eq!(
        c.err("load_project", json!({"project_id": "nope"})),
        "not_found"
    );
}
