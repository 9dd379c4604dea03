use roadtwin::calibration::{
    build_correspondences, estimate_time_offset, procrustes_align, LagSearch,
};
use roadtwin::geo::{
    normalize_deg, normalize_rad, project_trajectory, unproject_trajectory, AeqdProjection,
    RigidTransform2D,
};
use roadtwin::model::{GeoPoint, LocalPoint, ObjectClass, Trajectory};
use roadtwin::simulator::{
    generate_scene, AgentSpec, LaneSpec, LineSpec, Scene, SceneConfig, SensorModel, SpeedKnot,
};

fn scene_origin() -> GeoPoint {
    GeoPoint::new(40.8136, -96.7026).unwrap()
}

/// A lane bending through a quarter circle of radius 120 m.
fn curved_lane() -> LaneSpec {
    let pts = (0..=30)
        .map(|k| {
            let a = -0.8 + 1.6 * k as f64 / 30.0;
            [120.0 * a.sin(), 120.0 * (1.0 - a.cos()) - 20.0]
        })
        .collect();
    LaneSpec {
        lane_id: "bend".into(),
        centerline: LineSpec::Coordinates(pts),
        width_m: 3.6,
    }
}

fn agent(id: &str, entry: f64) -> AgentSpec {
    AgentSpec {
        agent_id: id.into(),
        class: ObjectClass::PassengerVehicle,
        lane_id: "bend".into(),
        entry_time: entry,
        speed_profile: vec![
            SpeedKnot {
                t: 0.0,
                speed: 14.0,
            },
            SpeedKnot {
                t: 3.0,
                speed: 14.0,
            },
            SpeedKnot { t: 6.0, speed: 7.0 },
            SpeedKnot {
                t: 9.0,
                speed: 11.0,
            },
        ],
        lateral_offset_m: 0.0,
    }
}

fn config(seed: u64, sensor: SensorModel) -> SceneConfig {
    SceneConfig {
        seed,
        origin: scene_origin(),
        start_time: 1_700_000_000.0,
        duration: 16.0,
        lanes: vec![curved_lane()],
        agents: vec![agent("a", 0.0)],
        sensors: vec![sensor],
    }
}

/// A sensor 40 m north-east of the scene center.
fn displaced_lidar() -> SensorModel {
    let origin = AeqdProjection::new(scene_origin()).inverse(LocalPoint::new(30.0, 25.0));
    SensorModel {
        extrinsic_error: RigidTransform2D::new(
            0.6,
            LocalPoint::new(-30.0, 12.0),
            LocalPoint::ORIGIN,
        ),
        ..SensorModel::lidar("lidar", origin)
    }
}

/// Ground truth of agent `a` in the sensor's own AEQD frame.
fn truth_in_sensor_frame(scene: &Scene, sensor: &SensorModel) -> Trajectory {
    let wgs =
        unproject_trajectory(&scene.ground_truth[0], &AeqdProjection::new(scene_origin())).unwrap();
    project_trajectory(&wgs, &AeqdProjection::new(sensor.origin)).unwrap()
}

#[test]
fn injected_extrinsic_is_recovered() {
    for seed in 0..10 {
        let sensor = displaced_lidar();
        let scene = generate_scene(&config(seed, sensor.clone())).unwrap();
        let obs = scene.sensors[0].trajectories.values().next().unwrap();
        let truth = truth_in_sensor_frame(&scene, &sensor);
        let corr = build_correspondences(obs, &truth, 0.2).unwrap();
        assert!(corr.len() >= 100);
        let fit = procrustes_align(&corr).unwrap().transform();
        let expected = sensor.extrinsic_error.inverse().about_origin();
        assert!(
            normalize_rad(fit.theta - expected.theta).abs().to_degrees() < 0.1,
            "seed {seed}"
        );
        assert!(
            fit.translation.distance(expected.translation) < 0.1,
            "seed {seed}"
        );
    }
}

#[test]
fn injected_clock_offset_is_recovered() {
    for (seed, offset) in [(1, -0.4), (2, 0.0), (3, 0.2), (4, 0.35)] {
        let sensor = SensorModel {
            clock_offset: offset,
            ..displaced_lidar()
        };
        let scene = generate_scene(&config(seed, sensor.clone())).unwrap();
        let obs = scene.sensors[0].trajectories.values().next().unwrap();
        let truth = truth_in_sensor_frame(&scene, &sensor);
        let est = estimate_time_offset(obs, &truth, &LagSearch::default()).unwrap();
        assert!(
            (est.lag - offset).abs() <= 1.0 / sensor.rate,
            "offset {offset}: got {}",
            est.lag
        );
    }
}

#[test]
fn observations_stay_within_coverage_plus_five_sigma() {
    for seed in 0..20 {
        let radar = SensorModel {
            mounting_azimuth: 60.0,
            ..SensorModel::radar_camera("radar", scene_origin())
        };
        let mut cfg = config(seed, radar.clone());
        cfg.agents.push(agent("b", 4.0));
        let scene = generate_scene(&cfg).unwrap();
        let bound = 5.0 * radar.position_noise_sigma;
        let mut n = 0;
        for t in scene.sensors[0].trajectories.values() {
            for p in t.points() {
                let q = p.planar().unwrap();
                let range_excess = q.norm() - radar.range;
                let bearing = q.east.atan2(q.north).to_degrees();
                let angle_excess =
                    normalize_deg(bearing - radar.mounting_azimuth).abs() - radar.fov / 2.0;
                let fov_excess = if angle_excess > 0.0 {
                    q.norm() * angle_excess.to_radians().sin()
                } else {
                    0.0
                };
                assert!(
                    range_excess <= bound && fov_excess <= bound,
                    "seed {seed}: {q:?}"
                );
                n += 1;
            }
        }
        assert!(n > 0);
    }
}

#[test]
fn links_name_the_observed_agents() {
    let mut cfg = config(5, displaced_lidar());
    cfg.agents.push(agent("b", 2.0));
    let scene = generate_scene(&cfg).unwrap();
    let agents: Vec<&str> = scene.links.iter().map(|l| l.agent_id.as_str()).collect();
    assert_eq!(agents, vec!["a", "b"]);
    for l in &scene.links {
        assert!(scene.sensors[0].trajectories.contains_key(&l.track_id));
    }
}
