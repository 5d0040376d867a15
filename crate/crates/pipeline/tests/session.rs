use cisplit_core::model::{argmax, StubModel};
use cisplit_pipeline::config::{CodecSetting, ConcealSetting, PipelineConfig};
use cisplit_pipeline::session::{session_stats, DropReason};
use cisplit_pipeline::transcode::{decode_tensor, encode_tensor};
use cisplit_pipeline::{run_session, SessionOutcome};

fn config(frames: usize, loss_prob: f64, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        frames,
        ..PipelineConfig::default()
    };
    cfg.link.loss_prob = loss_prob;
    cfg.link.seed = seed;
    cfg
}

fn first_line(o: &SessionOutcome, event: &str) -> Option<usize> {
    o.log
        .lines()
        .position(|l| l.split(',').nth(1) == Some(event))
}

#[test]
fn same_seed_same_log() {
    let cfg = config(20, 0.05, 3);
    let a = run_session(&cfg).unwrap();
    let b = run_session(&cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.report, b.report);
    let mut other = cfg.clone();
    other.link.seed = 4;
    assert_ne!(run_session(&other).unwrap().log, a.log);
}

#[test]
fn no_data_before_model_ready() {
    let o = run_session(&config(5, 0.0, 1)).unwrap();
    assert!(o.log.starts_with("time_us,event,frame_id,offset,len\n"));
    let ready = first_line(&o, "s2c.deliver.model_ready").expect("handshake completes");
    let data = first_line(&o, "c2s.send.data").expect("some data sent");
    let switch = first_line(&o, "c2s.send.model_switch").unwrap();
    assert!(switch < ready && ready < data);
    assert!(o.report.summary.handshake_us >= o.report.config.link.rtt_us);
}

#[test]
fn handshake_survives_a_lossy_link() {
    let o = run_session(&config(10, 0.3, 8)).unwrap();
    assert!(o.report.summary.handshake_us > 0);
}

#[test]
fn lossless_link_is_bit_exact() {
    let o = run_session(&config(30, 0.0, 1)).unwrap();
    let s = &o.report.summary;
    assert_eq!(s.failed, 0);
    assert_eq!(s.concealed_frames, 0);
    assert_eq!(s.completed + s.dropped, s.frames);
    for f in o.report.frames.iter().filter(|f| !f.dropped) {
        assert_eq!(f.bit_exact, Some(true), "frame {}", f.frame_number);
        assert!(f.concealed_ranges.is_empty());
        assert!(f.latency_us.is_some());
    }
    // agreement is whatever the codec alone gives, frame by frame
    let cfg = &o.report.config;
    let model = StubModel::new(cfg.seed);
    let stats = session_stats(cfg, &model).unwrap();
    for f in o.report.frames.iter().filter(|f| !f.dropped) {
        let t = model.cut_tensor(f.image_id, cfg.cut);
        let bits = encode_tensor(&t, &cfg.quantizer, &stats, cfg.codec).unwrap();
        assert_eq!(f.sent_bytes, bits.len() as u64);
        let r = decode_tensor(bits.bytes(), &cfg.quantizer, &stats).unwrap();
        let offline =
            argmax(&model.forward_server(&r, cfg.cut).unwrap()) == model.classify(f.image_id);
        assert_eq!(f.agree, Some(offline), "frame {}", f.frame_number);
    }
}

#[test]
fn without_concealment_damaged_frames_fail() {
    let mut cfg = config(40, 0.15, 2);
    cfg.concealment = ConcealSetting::None;
    let o = run_session(&cfg).unwrap();
    let s = &o.report.summary;
    assert!(s.failed > 0);
    for f in o.report.frames.iter().filter(|f| f.failed) {
        assert!(
            f.latency_us.is_none(),
            "failed frame {} got a result",
            f.frame_number
        );
    }
    assert!(first_line(&o, "frame.fail").is_some());

    cfg.concealment = ConcealSetting::DatasetMean;
    let o = run_session(&cfg).unwrap();
    assert_eq!(o.report.summary.failed, 0);
    assert!(o.report.summary.concealed_frames > 0);
    assert!(first_line(&o, "frame.conceal").is_some());
}

#[test]
fn overload_drops_frames_at_the_gate() {
    let mut cfg = config(60, 0.0, 1);
    cfg.link.bandwidth_bps = 5e4;
    cfg.codec = CodecSetting::Quality(95);
    cfg.frame_interval_us = 20_000;
    let o = run_session(&cfg).unwrap();
    let s = &o.report.summary;
    assert!(s.dropped > s.frames / 2);
    assert_eq!(s.gate_violations, 0);
    assert!(o
        .report
        .frames
        .iter()
        .any(|f| f.drop_reason == Some(DropReason::Gate)));
    for c in &o.send_checks {
        assert!(c.outstanding as f64 <= c.expected_lost + cfg.mss as f64);
    }
}

#[test]
fn report_uses_wire_field_names() {
    let o = run_session(&config(3, 0.0, 1)).unwrap();
    let v = serde_json::to_value(&o.report).unwrap();
    let f = &v["frames"][0];
    for key in [
        "frameNumber",
        "imageId",
        "sentBytes",
        "concealedRanges",
        "bitExact",
    ] {
        assert!(f.get(key).is_some(), "missing {key}");
    }
    let back: cisplit_pipeline::SessionReport = serde_json::from_value(v).unwrap();
    assert_eq!(back, o.report);
}
