use canids::bench::{measure_latency, FloatFrameEngine, FrameEngine, QuantFrameEngine, ScriptedClock};
use canids::canbus::{parse_log, write_log, AttackKind, Label, ParseOptions};
use canids::eval::{evaluate_model, Classifier};
use canids::features::stream_windows;
use canids::nn::ArchConfig;
use canids::quant::{calibrate, fold_batchnorm, quantize_model};
use canids::trafgen::{gen_benign, inject_dos, inject_fuzzing, BenignProfile, DosParams, FuzzParams};
use canids::Model;
use std::time::Duration;

fn dos_params() -> DosParams {
    DosParams {
        flood_id: 0,
        interval: 3e-4,
        burst_windows: vec![(0.5, 1.0)],
        seed: 9,
    }
}

#[test]
fn generated_logs_survive_a_csv_roundtrip() {
    let benign = gen_benign(&BenignProfile::vehicle_like(2.0, 4)).unwrap();
    let dos = inject_dos(&benign, &dos_params()).unwrap();
    let fuzz = inject_fuzzing(
        &benign,
        &FuzzParams {
            interval_min: 3e-4,
            interval_max: 1e-3,
            burst_windows: vec![(0.2, 0.6), (1.2, 1.9)],
            seed: 5,
        },
    )
    .unwrap();
    for log in [&benign, &dos, &fuzz] {
        let mut bytes = Vec::new();
        write_log(log, &mut bytes).unwrap();
        let back = parse_log(&bytes[..], &ParseOptions::default()).unwrap();
        assert_eq!(back.frames(), log.frames());
        let mut again = Vec::new();
        write_log(&back, &mut again).unwrap();
        assert_eq!(again, bytes);
    }
    assert_eq!(dos.count_label(Label::Normal), benign.len());
    assert_eq!(fuzz.count_label(Label::Normal), benign.len());
    // a flood every 300 us over half a second
    let floods = dos.count_label(Label::DosAttack);
    assert!((1660..=1668).contains(&floods), "{floods}");
}

#[test]
fn window_labels_follow_the_newest_frame() {
    let benign = gen_benign(&BenignProfile::vehicle_like(1.5, 8)).unwrap();
    let dos = inject_dos(&benign, &dos_params()).unwrap();
    let windows = stream_windows(&dos);
    assert_eq!(windows.len(), dos.len() - 3);
    for (w, f) in windows.iter().zip(&dos.frames()[3..]) {
        assert_eq!(w.label == 1, f.label().is_attack());
        assert_eq!(w.newest_id, f.id());
    }
    let inside = windows.iter().filter(|w| (0.5..1.0).contains(&w.newest_timestamp) && w.newest_id == 0);
    assert!(inside.clone().count() > 1000);
    assert!(inside.into_iter().all(|w| w.label == 1));
}

#[test]
fn streaming_engines_match_batch_scores() {
    let log = inject_dos(&gen_benign(&BenignProfile::vehicle_like(0.3, 2)).unwrap(), &DosParams {
        burst_windows: vec![(0.1, 0.2)],
        ..dos_params()
    })
    .unwrap();
    let windows = stream_windows(&log);
    let inputs: Vec<_> = windows.iter().map(|w| w.tensor).collect();
    let model = Model::new(ArchConfig::with_channels(&[4, 8]), 2).unwrap();
    let folded = fold_batchnorm(&model).unwrap();
    let q = quantize_model(&folded, &calibrate(&folded, &inputs).unwrap()).unwrap();

    let batch_f = model.scores(&inputs).unwrap();
    let batch_q = q.scores(&inputs).unwrap();
    let mut fe = FloatFrameEngine::new(&model);
    let mut qe = QuantFrameEngine::new(&q);
    let mut got_f = Vec::new();
    let mut got_q = Vec::new();
    for f in log.frames() {
        got_f.extend(fe.push_frame(f.id()).unwrap());
        got_q.extend(qe.push_frame(f.id()).unwrap());
    }
    assert_eq!(got_q, batch_q);
    assert_eq!(got_f.len(), batch_f.len());
    for (a, b) in got_f.iter().zip(&batch_f) {
        assert!((a - b).abs() < 1e-6);
    }
    // buffers are sized once and then reused
    assert_eq!(fe.growth_events(), 1);
    assert_eq!(qe.growth_events(), 1);
    fe.reset();
    assert_eq!(fe.push_frame(1).unwrap(), None);

    let report = evaluate_model(&q, &windows, AttackKind::Dos, 0.5).unwrap();
    assert_eq!(report.model_kind, "quant");
    assert_eq!(report.samples as usize, windows.len());
}

#[test]
fn latency_measurement_with_a_scripted_clock() {
    let model = Model::new(ArchConfig::with_channels(&[4]), 0).unwrap();
    let mut e = FloatFrameEngine::new(&model);
    let ids: Vec<u16> = (0..10).map(|i| 0x100 + i).collect();
    // each timed call reads the clock twice: 100 us, then 300 us apart on alternate calls
    let mut clock = ScriptedClock::new(vec![Duration::from_micros(100), Duration::from_micros(300)]);
    let s = measure_latency(&mut e, &ids, 40, 10, 0.5, &mut clock).unwrap();
    assert_eq!(s.count, 30);
    assert!(s.max >= s.p99 && s.p99 >= s.median && s.median > 0.0);
    assert_eq!(e.growth_events(), 1);
    assert!(measure_latency(&mut e, &ids, 20, 0, 0.5, &mut clock).is_err());
    assert!(measure_latency(&mut e, &[], 40, 0, 0.5, &mut clock).is_err());
}

#[test]
fn odd_block_counts_allocate_once() {
    let ids: Vec<u16> = (0..60).map(|i| (i * 37) % 2048).collect();
    for channels in [&[4][..], &[4, 6, 8], &[3, 5, 7, 9, 11]] {
        let model = Model::new(ArchConfig::with_channels(channels), 1).unwrap();
        let folded = fold_batchnorm(&model).unwrap();
        let inputs: Vec<_> = stream_windows(&gen_benign(&BenignProfile::vehicle_like(0.05, 1)).unwrap())
            .iter()
            .map(|w| w.tensor)
            .collect();
        let q = quantize_model(&folded, &calibrate(&folded, &inputs).unwrap()).unwrap();
        let mut fe = FloatFrameEngine::new(&model);
        let mut qe = QuantFrameEngine::new(&q);
        for &id in &ids {
            fe.push_frame(id).unwrap();
            qe.push_frame(id).unwrap();
        }
        assert_eq!((fe.growth_events(), qe.growth_events()), (1, 1), "{channels:?}");
    }
}
