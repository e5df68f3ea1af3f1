use std::net::{TcpListener, TcpStream};
use std::thread;

use fedprompt_core::fed::{run_experiment, DataSource, FedConfig};
use fedprompt_core::model::init_prompt;
use fedprompt_core::transport::wire::{read_message, write_message, FrameDecoder, MessageKind, WireMessage};
use fedprompt_core::transport::{connect_client, serve};
use fedprompt_core::{Error, Experiment};

fn small(clients: usize) -> FedConfig {
    let mut cfg = FedConfig {
        clients,
        rounds: 2,
        local_steps: 2,
        batch: 8,
        timeout_ms: 3_000,
        ..FedConfig::default()
    };
    cfg.pretrain.steps = 0;
    cfg.data = DataSource::Synthetic {
        train_size: 60,
        test_size: 20,
        words_per_text: 6,
        contamination: 0.1,
    };
    cfg
}

#[test]
fn update_frame_round_trips_bit_exactly() {
    let p = init_prompt::<f64>(3, 20, 32).unwrap();
    let upd = fedprompt_core::fed::ClientUpdateMsg { round: 7, client: 4, n_k: 123, prompt: p };
    let bytes = WireMessage::client_update(&upd).encode();
    assert_eq!(bytes.len(), 30 + 8 + 20 * 32 * 8);
    let back = WireMessage::decode(&bytes).unwrap().to_update::<f64>().unwrap();
    assert_eq!(back, upd);

    let mut dec = FrameDecoder::default();
    for chunk in bytes.chunks(7) {
        dec.push(chunk);
    }
    assert_eq!(dec.next_message().unwrap().unwrap().to_update::<f64>().unwrap(), upd);
    assert!(dec.next_message().unwrap().is_none());
}

#[test]
fn corrupted_frames_are_rejected() {
    let mut bytes = WireMessage::done(1).encode();
    bytes[0] = b'X';
    assert!(matches!(WireMessage::decode(&bytes), Err(Error::MalformedFrame { offset: 0, .. })));
    let mut bytes = WireMessage::done(1).encode();
    bytes[4] = 9;
    assert!(matches!(WireMessage::decode(&bytes), Err(Error::UnsupportedVersion(9))));
    let mut bytes = WireMessage::done(1).encode();
    bytes.push(0);
    assert!(WireMessage::decode(&bytes).is_err());
}

#[test]
fn networked_run_matches_in_process_run() {
    let cfg = small(3);
    let exp = Experiment::setup(cfg.clone()).unwrap();
    let local = run_experiment(&exp).unwrap();

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handles: Vec<_> = (0..3u32).map(|k| thread::spawn(move || connect_client::<f64>(k, addr))).collect();
    let remote = serve(&exp, &listener, |_| Ok(())).unwrap();
    for h in handles {
        assert_eq!(h.join().unwrap().unwrap().rounds_served, 2);
    }
    assert_eq!(remote.final_prompt, local.final_prompt);
    assert_eq!(remote.log, local.log);
    assert_eq!(remote.ledger, local.ledger);
}

#[test]
fn duplicate_hello_is_refused() {
    let exp = Experiment::setup(small(2)).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || serve(&exp, &listener, |_| Ok(())).map(|o| o.log.len()));

    let first = thread::spawn(move || connect_client::<f64>(0, addr));
    // Wait until client 0 is registered so the impostor is the duplicate.
    thread::sleep(std::time::Duration::from_millis(300));
    let mut dup = TcpStream::connect(addr).unwrap();
    write_message(&mut dup, &WireMessage::hello(0)).unwrap();
    let reply = read_message(&mut dup).unwrap().unwrap();
    assert_eq!(reply.kind, MessageKind::Error);
    assert!(reply.text().unwrap().contains("already connected"));

    let second = thread::spawn(move || connect_client::<f64>(1, addr));
    assert_eq!(server.join().unwrap().unwrap(), 2);
    first.join().unwrap().unwrap();
    second.join().unwrap().unwrap();
}

#[test]
fn silent_client_times_out_and_others_hear_error() {
    let mut cfg = small(2);
    cfg.timeout_ms = 500;
    let exp = Experiment::setup(cfg).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || serve(&exp, &listener, |_| Ok(())).map(|_| ()));

    let good = thread::spawn(move || connect_client::<f64>(0, addr));
    // Client 1 says hello, takes the config and then never answers.
    let mut mute = TcpStream::connect(addr).unwrap();
    write_message(&mut mute, &WireMessage::hello(1)).unwrap();
    assert_eq!(read_message(&mut mute).unwrap().unwrap().kind, MessageKind::Config);

    let err = server.join().unwrap().unwrap_err();
    assert!(matches!(err, Error::Timeout(ref m) if m.contains("[1]")), "{err}");
    assert!(good.join().unwrap().is_err());
    let mut kinds = Vec::new();
    while let Ok(Some(m)) = read_message(&mut mute) {
        kinds.push(m.kind);
    }
    assert_eq!(kinds.last(), Some(&MessageKind::Error));
}

#[test]
fn nobody_connects() {
    let mut cfg = small(2);
    cfg.timeout_ms = 200;
    let exp = Experiment::setup(cfg).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    assert!(matches!(serve(&exp, &listener, |_| Ok(())), Err(Error::Timeout(_))));
}
