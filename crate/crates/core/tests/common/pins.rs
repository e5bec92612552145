//! Closed-form physics checked against the high-precision oracle values in
//! `tests/fixtures/physics_pins.json`.

use std::f64::consts::PI;

use aoi_core::feasibility::{compute_diffs, max_slot_energy, required_energy, required_time};
use aoi_core::world::{
    coverage_radius, los_probability, path_loss, propulsion_energy, rotor_thrust, sinr, ChannelGains, UavPose,
    WorldConfig,
};
use serde_json::Value;

pub const PIN_REL_TOL: f64 = 1e-9;

/// One comparison: name, computed, expected.
pub type Check = (String, f64, f64);

fn fixture() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/physics_pins.json");
    serde_json::from_str(&std::fs::read_to_string(path).expect("fixture file")).expect("fixture json")
}

fn num(v: &Value) -> f64 {
    match v {
        Value::String(s) => s.parse().expect("numeric string"),
        other => other.as_f64().expect("number"),
    }
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

pub fn physics_checks() -> Vec<Check> {
    let fx = fixture();
    let pin = |k: &str| num(&fx["pins"][k]);
    let cfg = WorldConfig::table_i(3, 15);
    let with_xi = |db: f64| WorldConfig { xi_th_db: db, ..cfg.clone() };
    let mut out: Vec<Check> = Vec::new();
    let mut push = |name: &str, got: f64, want: f64| out.push((name.to_string(), got, want));

    for db in [3, 5, 7] {
        let key = format!("coverage_radius_{db}db");
        push(&key, coverage_radius(&with_xi(db as f64)).unwrap(), pin(&key));
    }
    push("los_probability_overhead", los_probability(100.0, 100.0, &cfg).unwrap(), pin("los_probability_overhead"));
    push("los_probability_d200", los_probability(200.0, 100.0, &cfg).unwrap(), pin("los_probability_d200"));
    push(
        "los_probability_500_horizontal",
        los_probability(500f64.hypot(100.0), 100.0, &cfg).unwrap(),
        pin("los_probability_500_horizontal"),
    );
    push("path_loss_los_d200", path_loss(200.0, true, &cfg), pin("path_loss_los_d200"));
    push("path_loss_nlos_d200", path_loss(200.0, false, &cfg), pin("path_loss_nlos_d200"));
    for (v, vn) in [(0.0, 0.0), (0.0, 20.0), (20.0, 0.0)] {
        let key = format!("thrust_{v}_{vn}");
        push(&key, rotor_thrust(v, vn, &cfg), pin(&key));
    }
    for (v, vn) in [(0.0, 0.0), (20.0, 20.0), (0.0, 20.0), (20.0, 0.0), (10.0, 20.0), (20.0, 10.0)] {
        let key = format!("energy_{v}_{vn}");
        push(&key, propulsion_energy(v, vn, &cfg), pin(&key));
    }
    push("max_slot_energy", max_slot_energy(&cfg), pin("max_slot_energy"));

    let mut gains = ChannelGains::new(2, 2);
    gains.set(0, 0, 1.0 / path_loss(200.0, true, &cfg));
    gains.set(1, 0, 1.0 / path_loss(300.0, false, &cfg));
    push(
        "sinr_one_interferer",
        sinr(0, &[Some(0), Some(1)], &gains, &cfg).unwrap(),
        pin("sinr_one_interferer"),
    );
    push("sinr_alone_los_d200", sinr(0, &[Some(0), None], &gains, &cfg).unwrap(), pin("sinr_alone_los_d200"));

    let p = aoi_core::world::advance_position([100.0, 100.0], 10.0, 20.0, PI / 3.0, &cfg).unwrap();
    push("displaced_x", p[0], pin("displaced_x"));
    push("displaced_y", p[1], pin("displaced_y"));

    for case in fx["return_cases"].as_array().unwrap() {
        let name = case["name"].as_str().unwrap();
        let u = [num(&case["position"][0]), num(&case["position"][1])];
        let stop = [num(&case["stop"][0]), num(&case["stop"][1])];
        let v = num(&case["speed"]);
        let h = num(&case["heading"]);
        push(
            &format!("{name}.t_req"),
            required_time(u, v, h, stop, &cfg) as f64,
            num(&case["t_req"]),
        );
        push(&format!("{name}.e_req"), required_energy(u, v, h, stop, &cfg), num(&case["e_req"]));
        let pose = UavPose {
            position: u,
            speed: v,
            heading: h,
            energy_spent: 1000.0,
            time_diff: 0,
            energy_diff: 0.0,
        };
        let (td, ed) = compute_diffs(&pose, 10, stop, &cfg);
        push(&format!("{name}.time_diff"), td as f64, num(&case["time_diff_t10"]));
        push(&format!("{name}.energy_diff"), ed, num(&case["energy_diff_spent1000"]));
    }
    out
}
