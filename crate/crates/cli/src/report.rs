use std::fmt::Write as _;

use serde::Serialize;

/// A command result that renders either as text or as one JSON document
/// carrying the same fields.
pub trait Report: Serialize {
    fn human(&self, out: &mut String) -> std::fmt::Result;
}

pub fn emit<R: Report>(report: &R, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(report).expect("reports serialise"));
    } else {
        let mut out = String::new();
        report.human(&mut out).expect("writing to a String");
        print!("{out}");
    }
}

pub fn shape(s: (usize, usize)) -> String {
    format!("{}x{}", s.0, s.1)
}

/// Formats small floats compactly and large or tiny ones in scientific form.
pub fn num(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else if (1e-3..1e6).contains(&x.abs()) {
        let mut s = format!("{x:.6}");
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
        s
    } else {
        format!("{x:.3e}")
    }
}

pub fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) -> std::fmt::Result {
    writeln!(out, "{key}: {value}")
}
