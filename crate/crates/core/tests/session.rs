use std::collections::BTreeSet;
use std::thread;

use semreq::control::{run_scheme, RequestPolicy, SessionError};
use semreq::latent::{split_sets, BlockIndex};
use semreq::phy::BITS_PER_COEFFICIENT;
use semreq::session::{
    decode_request, encode_request, memory_pair, run_end_to_end, run_transmitter, Direction, Frame,
    FrameKind, FrameTransport, MetaPayload, TransportKind,
};
use semreq::sweep::synthetic_corpus;
use semreq::{
    BackendSuite, ChannelConfig, Image, LinkModel, Scheme, SessionConfig, TensorDims, TerminatedBy,
};

fn small() -> (TensorDims, BackendSuite, Vec<(String, Image)>) {
    let dims = TensorDims::new([3, 32, 32], [4, 8, 8]).unwrap();
    (
        dims,
        BackendSuite::toy(dims).unwrap(),
        synthetic_corpus(4, &dims),
    )
}

fn cfg(tau: f64, seed: u64) -> SessionConfig {
    SessionConfig {
        tau,
        block_side: 2,
        snr_db: 7.0,
        seed,
        ..SessionConfig::default()
    }
}

fn awgn(seed: u64) -> LinkModel {
    LinkModel::Awgn(ChannelConfig::new(7.0, seed).unwrap())
}

#[test]
fn memory_and_tcp_transports_agree() {
    let (_, suite, images) = small();
    for (k, (_, image)) in images.iter().enumerate() {
        let c = cfg(0.9, k as u64);
        let a = run_end_to_end(
            image,
            &c,
            &suite,
            awgn(k as u64),
            RequestPolicy::Semantic,
            TransportKind::InMemory,
        )
        .unwrap();
        let b = run_end_to_end(
            image,
            &c,
            &suite,
            awgn(k as u64),
            RequestPolicy::Semantic,
            TransportKind::Tcp,
        )
        .unwrap();
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.result, b.result);
    }
}

#[test]
fn frame_order_follows_the_protocol() {
    let (_, suite, images) = small();
    let c = cfg(0.95, 3);
    let out = run_end_to_end(
        &images[1].1,
        &c,
        &suite,
        awgn(3),
        RequestPolicy::Semantic,
        TransportKind::InMemory,
    )
    .unwrap();
    let frames = out.transcript.frames().unwrap();
    let kinds: Vec<(Direction, FrameKind, u16)> =
        frames.iter().map(|(d, f)| (*d, f.kind, f.round)).collect();
    assert_eq!(kinds[0], (Direction::Down, FrameKind::Meta, 0));
    assert_eq!(kinds[1], (Direction::Down, FrameKind::Text, 0));
    assert_eq!(kinds[2], (Direction::Down, FrameKind::Latent, 0));
    let last = out.result.final_round() as u16;
    assert!(last > 0, "fixture should need a retransmission");
    assert_eq!(
        *kinds.last().unwrap(),
        (Direction::Up, FrameKind::Fin, last)
    );
    let mut expected_round = 1;
    for pair in kinds[3..kinds.len() - 1].chunks(2) {
        assert_eq!(pair[0], (Direction::Up, FrameKind::Request, expected_round));
        assert_eq!(
            pair[1],
            (Direction::Down, FrameKind::Latent, expected_round)
        );
        expected_round += 1;
    }
    assert_eq!(expected_round - 1, last);
}

#[test]
fn blocks_are_conserved_and_never_repeated() {
    let (dims, suite, images) = small();
    let per_block = dims.latent_channels * 2 * 2;
    for seed in 0..6u64 {
        let c = cfg(0.95, seed);
        let image = &images[seed as usize % images.len()].1;
        let out = run_end_to_end(
            image,
            &c,
            &suite,
            awgn(seed),
            RequestPolicy::Semantic,
            TransportKind::InMemory,
        )
        .unwrap();
        let frames = out.transcript.frames().unwrap();
        let meta = MetaPayload::decode(&frames[0].1.payload).unwrap();
        let initial = split_sets(&meta.mask);

        let mut seen: BTreeSet<BlockIndex> = initial.transmitted.clone();
        for (_, f) in frames.iter().filter(|(_, f)| f.kind == FrameKind::Request) {
            for b in decode_request(&f.payload).unwrap() {
                assert!(initial.withheld.contains(&b), "{b} was not withheld");
                assert!(seen.insert(b), "{b} requested twice");
            }
        }
        let r = &out.result;
        assert_eq!(seen.len(), r.accounting.latent_blocks);
        assert_eq!(
            r.accounting.latent.info,
            r.accounting.latent_blocks * per_block * BITS_PER_COEFFICIENT
        );
        assert_eq!(
            r.rounds.iter().map(|x| x.received_blocks).sum::<usize>(),
            r.accounting.latent_blocks
        );
        let n = initial.total();
        assert!((r.rate.q - seen.len() as f64 / n as f64).abs() < 1e-12);
        assert!((r.rate.q + r.rate.d - 1.0).abs() < 1e-12);
    }
}

#[test]
fn full_mask_sends_no_latent() {
    let (_, suite, images) = small();
    let c = SessionConfig {
        scheme: Scheme::FullMask,
        ..cfg(0.99, 1)
    };
    let out = run_end_to_end(
        &images[0].1,
        &c,
        &suite,
        awgn(1),
        RequestPolicy::Semantic,
        TransportKind::InMemory,
    )
    .unwrap();
    let kinds: Vec<FrameKind> = out
        .transcript
        .frames()
        .unwrap()
        .iter()
        .map(|(_, f)| f.kind)
        .collect();
    assert_eq!(kinds, [FrameKind::Meta, FrameKind::Text, FrameKind::Fin]);
    let r = &out.result;
    assert_eq!(r.rounds.len(), 1);
    assert_eq!(r.rate.q, 0.0);
    assert_eq!(r.rate.kappa, 0.0);
    assert_eq!(r.accounting.latent_blocks, 0);
    assert_eq!(r.rounds[0].d, 1.0);
    assert_eq!(r.rounds[0].selected_guidance, c.guidance);
}

#[test]
fn no_guidance_replays_the_main_schedule() {
    let (_, suite, images) = small();
    for seed in 0..4u64 {
        let image = &images[seed as usize].1;
        let main = run_scheme(image, &cfg(0.9, seed), &suite, awgn(seed)).unwrap();
        let c = SessionConfig {
            scheme: Scheme::NoGuidance,
            ..cfg(0.9, seed)
        };
        let ng = run_end_to_end(
            image,
            &c,
            &suite,
            awgn(seed),
            RequestPolicy::replay_of(&main),
            TransportKind::InMemory,
        )
        .unwrap();
        assert!(ng
            .transcript
            .frames()
            .unwrap()
            .iter()
            .all(|(_, f)| f.kind != FrameKind::Text));
        let r = &ng.result;
        assert_eq!(r.rounds.len(), main.rounds.len());
        assert_eq!(r.terminated_by, TerminatedBy::Scheduled);
        assert_eq!(r.rate, main.rate);
        assert_eq!(r.accounting.latent, main.accounting.latent);
        for (a, b) in r.rounds.iter().zip(&main.rounds) {
            assert_eq!(a.requested, b.requested);
            assert_eq!(a.selected_guidance, 0.0);
            assert_eq!(a.r, None);
        }
        assert_eq!(
            run_scheme(image, &c, &suite, awgn(seed)).unwrap(),
            ng.result
        );
    }
}

#[test]
fn black_image_matches_its_caption_at_once() {
    let (dims, suite, _) = small();
    let black = Image::filled(3, dims.height, dims.width, 0.0);
    let c = cfg(0.9, 5);
    let r = run_scheme(&black, &c, &suite, LinkModel::Noiseless).unwrap();
    assert_eq!(r.final_round(), 0);
    assert_eq!(r.final_score(), Some(1.0));
    assert_eq!(r.terminated_by, TerminatedBy::Threshold);
    assert_eq!(
        r.received_caption.as_deref(),
        Some(suite.captioner.caption(&black).unwrap().as_str())
    );
}

#[test]
fn transmitter_rejects_requests_for_sent_blocks() {
    let (_, suite, images) = small();
    let c = cfg(0.9, 2);
    let (mut tx_end, mut rx_end) = memory_pair();
    let image = images[0].1.clone();
    let suite2 = suite.clone();
    let c2 = c.clone();
    let handle = thread::spawn(move || {
        run_transmitter(&mut tx_end, &image, &c2, &suite2, LinkModel::Noiseless)
    });
    let meta = MetaPayload::decode(&rx_end.recv().unwrap().payload).unwrap();
    assert_eq!(rx_end.recv().unwrap().kind, FrameKind::Text);
    assert_eq!(rx_end.recv().unwrap().kind, FrameKind::Latent);
    let sent = *split_sets(&meta.mask).transmitted.iter().next().unwrap();
    rx_end
        .send(&Frame::new(
            FrameKind::Request,
            1,
            encode_request(&[sent]).unwrap(),
        ))
        .unwrap();
    let err = handle.join().unwrap().unwrap_err();
    assert!(matches!(err, SessionError::Codec(_)), "{err}");
}

#[test]
fn receiver_rejects_out_of_order_frames() {
    let (_, suite, _) = small();
    let c = cfg(0.9, 2);
    let (mut tx_end, mut rx_end) = memory_pair();
    tx_end.send(&Frame::fin(0)).unwrap();
    let err = semreq::session::run_receiver(&mut rx_end, &c, &suite, RequestPolicy::Semantic)
        .unwrap_err();
    assert!(
        matches!(err.error, SessionError::Protocol(_)),
        "{}",
        err.error
    );
}

#[test]
fn mismatched_meta_is_refused() {
    let (_, suite, images) = small();
    let sender = cfg(0.9, 2);
    let receiver = SessionConfig {
        block_side: 4,
        ..sender.clone()
    };
    let (mut tx_end, mut rx_end) = memory_pair();
    let image = images[0].1.clone();
    let suite2 = suite.clone();
    let handle = thread::spawn(move || {
        run_transmitter(&mut tx_end, &image, &sender, &suite2, LinkModel::Noiseless)
    });
    let err =
        semreq::session::run_receiver(&mut rx_end, &receiver, &suite, RequestPolicy::Semantic)
            .unwrap_err();
    assert!(
        matches!(err.error, SessionError::Protocol(_)),
        "{}",
        err.error
    );
    drop(rx_end);
    let _ = handle.join().unwrap();
}
