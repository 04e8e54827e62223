use std::net::TcpListener;
use std::thread;

use qbm_core::bridge::{serve_dry_run, EpsRequest, EpsResponse, ExternalDenoiser, WireTensor};
use qbm_core::synthetic::{draw_pairs, SyntheticPrior};
use qbm_core::{
    restore, DegradationOperator, Denoiser, ImageTensor, RestorationConfig, ScheduleConfig, Shape,
    ZeroDenoiser,
};

fn dry_run_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || serve_dry_run(listener));
    addr
}

#[test]
fn dry_run_matches_zero_denoiser() {
    let addr = dry_run_server();
    let external = ExternalDenoiser::connect(&addr).unwrap();
    let schedule = ScheduleConfig::default().build().unwrap();
    let prior = SyntheticPrior {
        height: 16,
        width: 16,
        ..Default::default()
    }
    .build()
    .unwrap();
    let op = DegradationOperator::sr(2, prior.shape()).unwrap();
    let (_, y) = draw_pairs(&prior, &op, 1, 3).unwrap().remove(0);
    for eta in [0.0, 0.85, 1.0] {
        let cfg = RestorationConfig {
            eta,
            num_steps: 20,
            bypass_step: Some(400),
            seed: 5,
        };
        let remote = restore(&y, &op, &external, &schedule, &cfg).unwrap();
        let local = restore(&y, &op, &ZeroDenoiser, &schedule, &cfg).unwrap();
        let diff = remote.image.try_sub(&local.image).unwrap().max_abs();
        assert!(diff < 1e-6, "eta {eta}: {diff}");
        assert_eq!(remote.denoiser_calls, local.denoiser_calls);
    }
}

#[test]
fn ids_round_trip_over_many_frames() {
    let addr = dry_run_server();
    let external = ExternalDenoiser::connect(&addr).unwrap();
    let x = ImageTensor::filled(Shape::new(2, 3, 1), 0.25);
    let tensor = WireTensor::from_image(&x);
    for id in 0..1000u64 {
        let reply = external
            .request(&EpsRequest {
                id: id * 7 + 3,
                t: 1 + (id as u32 % 1000),
                tensor: tensor.clone(),
            })
            .unwrap();
        assert_eq!(reply.id(), id * 7 + 3);
        match reply {
            EpsResponse::Ok { tensor, .. } => assert_eq!(tensor.dims, vec![2, 3, 1]),
            EpsResponse::Error { message, .. } => panic!("{message}"),
        }
    }
}

#[test]
fn denoiser_calls_go_through_the_wire() {
    let addr = dry_run_server();
    let external = ExternalDenoiser::connect(&addr).unwrap();
    let schedule = ScheduleConfig::default().build().unwrap();
    let x = ImageTensor::filled(Shape::new(4, 4, 3), -0.5);
    let eps = external.epsilon(&x, 10, &schedule).unwrap();
    assert_eq!(eps, ImageTensor::zeros(x.shape()));
}

#[test]
fn unreachable_endpoint_is_an_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    drop(listener);
    assert!(ExternalDenoiser::connect(&addr).is_err());
}
