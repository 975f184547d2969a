use std::net::TcpListener;
use std::sync::Arc;

use tungstenite::Message;
use vpgs::backplate::Backplate;
use vpgs::camera::Camera;
use vpgs::image::RgbImage;
use vpgs::math::Vec3;
use vpgs::scene::{Splat, SplatScene};
use vpgs::service::{decode_frame, serve, Aov, Encoding, Limits, Response, SessionAssets};

fn assets() -> SessionAssets {
    let mut scene = SplatScene::new();
    let mut s = Splat::isotropic([0.0, 0.0, 4.0], 0.6, 0.9, [0.4, 0.3, 0.2]);
    s.intensity_sh[0] = [1.0];
    scene.push(s);
    let cam = Camera::look_at(0, Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, -1.0, 0.0), 0.8, 40, 30).unwrap();
    SessionAssets {
        scene: Arc::new(scene),
        cameras: Arc::new(vec![cam]),
        backgrounds: Arc::new(vec![RgbImage::filled(32, 32, [0.0; 3]), RgbImage::filled(32, 32, [1.0, 0.5, 0.0])]),
        backplate: Some(Backplate::new([[-6.0, -6.0, 8.0], [6.0, -6.0, 8.0], [6.0, 6.0, 8.0], [-6.0, 6.0, 8.0]]).unwrap()),
        mip_levels: 4,
        scene_path: None,
        limits: Limits::default(),
    }
}

fn next_text(ws: &mut tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<std::net::TcpStream>>) -> Response {
    match ws.read().unwrap() {
        Message::Text(t) => serde_json::from_str(&t).unwrap(),
        other => panic!("expected text, got {other:?}"),
    }
}

#[test]
fn scripted_client_round_trip() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let a = assets();
    std::thread::spawn(move || serve(listener, a));

    let (mut ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
    ws.send(Message::text(r#"{"type":"hello","version":1,"encoding":"png"}"#)).unwrap();
    assert!(matches!(next_text(&mut ws), Response::Hello { encoding: Encoding::Png, width: 40, height: 30, .. }));

    ws.send(Message::text(r#"{"seq":1,"type":"set_background","id":0}"#)).unwrap();
    assert_eq!(next_text(&mut ws), Response::Ack { seq: Some(1), op: "set_background".into() });
    ws.send(Message::text(r#"{"seq":2,"type":"request_frame","aovs":["residual","color"]}"#)).unwrap();
    match next_text(&mut ws) {
        Response::Frame { seq, width, height, aovs } => {
            assert_eq!((seq, width, height), (Some(2), 40, 30));
            assert_eq!(aovs, vec![Aov::Residual, Aov::Color]);
        }
        other => panic!("{other:?}"),
    }
    let residual = decode_frame(&ws.read().unwrap().into_data()).unwrap();
    assert_eq!(residual.aov, Aov::Residual);
    assert!(residual.pixels.iter().all(|&v| v == 0));
    let color = decode_frame(&ws.read().unwrap().into_data()).unwrap();
    assert_eq!((color.aov, color.channels, color.pixels.len()), (Aov::Color, 3, 40 * 30 * 3));

    ws.send(Message::text("{")).unwrap();
    assert!(matches!(next_text(&mut ws), Response::Error { .. }));

    // Queue a burst; every reply arrives in order and at least the last
    // frame request is rendered.
    for i in 0..5 {
        ws.send(Message::text(format!(r#"{{"seq":{},"type":"set_exposure","scale":{}}}"#, 10 + 2 * i, i as f64 * 0.25))).unwrap();
        ws.send(Message::text(format!(r#"{{"seq":{},"type":"request_frame"}}"#, 11 + 2 * i))).unwrap();
    }
    let mut seen = Vec::new();
    let mut rendered = Vec::new();
    while seen.last() != Some(&19) {
        match next_text(&mut ws) {
            Response::Ack { seq: Some(s), .. } | Response::Cancelled { seq: Some(s) } => seen.push(s),
            Response::Frame { seq: Some(s), .. } => {
                seen.push(s);
                rendered.push(s);
                decode_frame(&ws.read().unwrap().into_data()).unwrap();
            }
            other => panic!("{other:?}"),
        }
    }
    assert_eq!(seen, (10..20).collect::<Vec<u64>>());
    assert_eq!(rendered.last(), Some(&19));
    ws.close(None).unwrap();
}
