//! Named parameter sets for the published figures and the desk-scale field run.

use serde_json::{json, Value};

pub const NAMES: &[&str] = &["fig1", "fig2", "fig2-strengths", "fig3", "fig4", "fig4-desk"];

fn two_mode_base() -> Value {
    json!({
        "experiment": "two_mode",
        "chi": 0.01,
        "kappa": 0.09,
        "k_fb": 0.1,
        "N": 100,
        "beta0": 1e7f64.sqrt(),
    })
}

fn thermal_cooling() -> Value {
    let mut v = two_mode_base();
    let m = v.as_object_mut().unwrap();
    m.insert("delta_jz".into(), json!(2.6));
    m.insert("initial".into(), json!({"kind": "thermal"}));
    // shorter spacing than the fig1 default; see README
    m.insert("tau".into(), json!(0.7));
    m.insert("n_measurements".into(), json!(150));
    m.insert("n_traj".into(), json!(5000));
    v
}

fn field_base() -> Value {
    json!({
        "experiment": "field",
        "field": {
            "g": 1e-4,
            "omega0": 1.0,
            "r_d": 0.52,
            "beta0": 1.0,
            "mu": -2.0,
            "gamma_growth": 0.2,
            "n_hg_modes": 100
        },
        "thermal": {"t_equil": 30.0, "dt": 0.005, "vacuum_noise": true},
        "n_traj": 64
    })
}

pub fn preset(name: &str) -> Option<Value> {
    let v = match name {
        "fig1" => {
            let mut v = two_mode_base();
            let m = v.as_object_mut().unwrap();
            m.insert("lambda".into(), json!(0.8e-4));
            m.insert("n_measurements".into(), json!(62));
            m.insert("initial".into(), json!({"kind": "css", "bloch": [0.0, 0.4, -0.3]}));
            m.insert("n_traj".into(), json!(5000));
            m.insert("n_records".into(), json!(2000));
            v
        }
        "fig2" => thermal_cooling(),
        "fig2-strengths" => {
            let mut v = thermal_cooling();
            v["sweep_delta_jz"] = json!([2.6, 12.0, 0.3]);
            v
        }
        "fig3" => {
            let mut v = thermal_cooling();
            v["histogram_bins"] = json!(41);
            v
        }
        "fig4" => {
            let mut v = field_base();
            v["field"]["lambda_pc"] = json!(3.7e-5);
            v["field"]["k_fb"] = json!(4e-5);
            v["field"]["T_tilde"] = json!(3.5e5);
            v["grid"] = json!({"n_points": 1024, "length": 40.0});
            v["field_schedule"] = json!({"cycles": 60, "per_cycle": 150});
            v
        }
        "fig4-desk" => {
            let mut v = field_base();
            v["field"]["lambda_pc"] = json!(1e-2);
            v["field"]["k_fb"] = json!(2e-4);
            v["field"]["T_tilde"] = json!(7.5e4);
            v["grid"] = json!({"n_points": 512, "length": 40.0});
            v["field_schedule"] = json!({"cycles": 20, "per_cycle": 150, "steps_per_interval": 12});
            v
        }
        _ => return None,
    };
    Some(v)
}
