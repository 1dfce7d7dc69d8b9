use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use framesift_core::engine::PlanFile;
use framesift_core::eval::{
    extract_choice_letter, frame_recall, grounding_metrics, pair_by_id, qa_accuracy, AnswerRecord, GroundingRecord,
    TimeInterval,
};

use crate::config::{resolve, Flags};
use crate::error::CliError;
use crate::io::{parse_list, read_json, read_jsonl, read_source_scores, write_json};
use crate::{ConfigArgs, EvalCommand};

#[derive(Serialize)]
struct Report<T: Serialize> {
    metric: &'static str,
    #[serde(flatten)]
    result: T,
    config: Value,
}

fn effective_config(common: &ConfigArgs) -> Result<Value, CliError> {
    let mut f = Flags::default();
    common.flags(&mut f);
    Ok(resolve(None, common.config.as_deref(), f.0)?.echo())
}

fn emit<T: Serialize>(out: &Path, metric: &'static str, result: T, config: Value) -> Result<(), CliError> {
    let report = Report { metric, result, config };
    write_json(out, &report)?;
    let v = serde_json::to_value(&report).expect("report serializes");
    println!("{metric}");
    print_table(&v, "");
    Ok(())
}

fn print_table(v: &Value, prefix: &str) {
    let Value::Object(map) = v else { return };
    for (k, val) in map {
        if k == "metric" || k == "config" || k == "per_item_iou" {
            continue;
        }
        let key = format!("{prefix}{k}");
        match val {
            Value::Object(_) => print_table(val, &format!("{key}.")),
            Value::Number(n) => match n.as_f64() {
                Some(x) if !n.is_u64() => println!("  {key:<18} {x:.6}"),
                _ => println!("  {key:<18} {n}"),
            },
            other => println!("  {key:<18} {other}"),
        }
    }
    if prefix.is_empty() {
        if let Some(c) = v.get("config") {
            println!("config {}", serde_json::to_string(c).expect("config serializes"));
        }
    }
}

pub fn run(cmd: EvalCommand) -> Result<(), CliError> {
    match cmd {
        EvalCommand::Grounding {
            pred,
            gt,
            thresholds,
            out,
            common,
        } => {
            let config = effective_config(&common)?;
            let thresholds: Vec<f64> = parse_list(&thresholds, "threshold")?;
            if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
                return Err(CliError::usage("thresholds must lie in [0, 1]"));
            }
            let preds: Vec<GroundingRecord> = read_jsonl(&pred)?;
            let gts: Vec<GroundingRecord> = read_jsonl(&gt)?;
            let pairs = pair_by_id(&preds, &gts, |p| &p.item_id, |g| &g.item_id)?;
            let mut p_iv = Vec::with_capacity(pairs.len());
            let mut g_iv = Vec::with_capacity(pairs.len());
            for (p, g) in pairs {
                p_iv.push(p.interval()?);
                let g: TimeInterval = g
                    .interval()?
                    .ok_or_else(|| CliError::data(format!("reference {:?} has no interval", g.item_id)))?;
                g_iv.push(g);
            }
            let result = grounding_metrics(&p_iv, &g_iv, &thresholds)?;
            emit(&out, "grounding", result, config)
        }
        EvalCommand::Qa { pred, gold, out, common } => {
            let config = effective_config(&common)?;
            let preds: Vec<AnswerRecord> = read_jsonl(&pred)?;
            let golds: Vec<AnswerRecord> = read_jsonl(&gold)?;
            let pairs = pair_by_id(&preds, &golds, |p| &p.item_id, |g| &g.item_id)?;
            let mut answers = Vec::with_capacity(pairs.len());
            let mut letters = Vec::with_capacity(pairs.len());
            for (p, g) in pairs {
                let letter = extract_choice_letter(&g.answer)
                    .ok_or_else(|| CliError::data(format!("gold answer of {:?} has no option letter", g.item_id)))?;
                answers.push(p.answer.as_str());
                letters.push(letter);
            }
            let result = qa_accuracy(&answers, &letters)?;
            emit(&out, "qa", result, config)
        }
        EvalCommand::Recall {
            plan,
            annotated,
            out,
            common,
        } => {
            let config = effective_config(&common)?;
            let plan: PlanFile = read_json(&plan)?;
            let annotated: BTreeSet<usize> = read_source_scores(&annotated)?
                .into_iter()
                .filter(|(_, s)| s.is_relevant())
                .map(|(i, _)| i)
                .collect();
            let selected: Vec<usize> = plan.selected.iter().map(|f| f.source_index).collect();
            let result = frame_recall(&selected, &annotated)?;
            emit(&out, "recall", result, config)
        }
    }
}
