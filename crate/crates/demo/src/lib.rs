//! Browser bindings. Every export returns a JSON string; the plain functions
//! behind them are usable (and tested) without a JS host.

use ctxlora::backbone::LayerSpec;
use ctxlora::costmodel::{axial_ratio, CostInputs, CostReport};
use ctxlora::eval::{normalize_answer, token_f1};
use ctxlora::hypernet::{block_ranges, build_coupling_mask, memory_length};
use serde_json::json;
use wasm_bindgen::prelude::*;

#[allow(clippy::too_many_arguments)]
pub fn cost_json(h: u32, l: u32, v: u32, l_prime: u32, r: u32, c: u32, i: u32, t: u32) -> Result<String, String> {
    let inputs = CostInputs::new(
        h.into(),
        l.into(),
        v.into(),
        l_prime.into(),
        r.into(),
        c.into(),
        i.into(),
        t.into(),
    );
    let report = CostReport::compute(&inputs).map_err(|e| e.to_string())?;
    let (num, den) = axial_ratio(inputs.l, inputs.m);
    let mut value = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    value["axial_ratio"] = json!({ "num": num.to_string(), "den": den.to_string(), "value": num as f64 / den as f64 });
    value["table"] = json!(report.to_table());
    Ok(value.to_string())
}

/// Where each adapter block lives in one layer's memory slice, and the
/// coupled row-attention mask over its `M` tokens.
pub fn layout_json(h: u32, r: u32) -> Result<String, String> {
    let (h, r) = (h as usize, r as usize);
    if h == 0 || h % 4 != 0 || r == 0 {
        return Err("H must be a positive multiple of 4 and r positive".into());
    }
    let spec = LayerSpec::for_hidden(h);
    let m = memory_length(r, spec.d(), h);
    let cm = build_coupling_mask(&spec, r, m, h).map_err(|e| e.to_string())?;
    let blocks: Vec<_> = block_ranges(&spec, r)
        .into_iter()
        .map(|(b, s, e)| json!({ "target": b.target, "part": if b.is_a { "A" } else { "B" }, "start": s, "end": e }))
        .collect();
    let owner: Vec<String> = cm
        .assignment
        .iter()
        .map(|a| match a {
            Some(b) => format!("{:?}.{}", b.target, if b.is_a { "A" } else { "B" }).to_lowercase(),
            None => "-".into(),
        })
        .collect();
    let rows: Vec<String> = cm
        .mask
        .chunks(m)
        .map(|row| row.iter().map(|&x| if x { '#' } else { '.' }).collect())
        .collect();
    Ok(json!({ "hidden": h, "rank": r, "params_per_layer": r * spec.d(), "memory_tokens": m,
               "blocks": blocks, "owner": owner, "mask": rows })
    .to_string())
}

pub fn f1_json(prediction: &str, gold: &str) -> String {
    json!({
        "f1": token_f1(prediction, gold),
        "prediction_tokens": normalize_answer(prediction),
        "gold_tokens": normalize_answer(gold),
    })
    .to_string()
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn cost(h: u32, l: u32, v: u32, l_prime: u32, r: u32, c: u32, i: u32, t: u32) -> Result<String, JsValue> {
    cost_json(h, l, v, l_prime, r, c, i, t).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn layout(h: u32, r: u32) -> Result<String, JsValue> {
    layout_json(h, r).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn f1(prediction: &str, gold: &str) -> String {
    f1_json(prediction, gold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn cost_reports_memory_length_and_ratio() {
        let v: Value = serde_json::from_str(&cost_json(64, 4, 263, 2, 2, 50, 10, 10).unwrap()).unwrap();
        assert_eq!(v["inputs"]["m"], 37);
        assert_eq!(v["axial_ratio"]["num"], "41");
        assert_eq!(v["axial_ratio"]["den"], "296");
        assert!(cost_json(0, 4, 263, 2, 2, 50, 10, 10).is_err());
    }

    #[test]
    fn layout_covers_every_projection() {
        let v: Value = serde_json::from_str(&layout_json(64, 2).unwrap()).unwrap();
        assert_eq!(v["memory_tokens"], 37);
        assert_eq!(v["blocks"].as_array().unwrap().len(), 14);
        assert_eq!(v["blocks"][13]["end"], 2 * 1184);
        assert_eq!(v["mask"].as_array().unwrap().len(), 37);
        assert!(layout_json(10, 2).is_err());
    }

    #[test]
    fn f1_matches_core() {
        let v: Value = serde_json::from_str(&f1_json("The blue kite", "blue kite!")).unwrap();
        assert_eq!(v["f1"], 1.0);
    }
}
