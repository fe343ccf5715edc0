//! Bundle labeling: prompt construction, the simulated oracle, and the LLM client.

mod llm;
mod oracle;
mod prompt;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use llm::{annotate_llm, AnnotationCache, LlmClient, LlmEndpointConfig};
pub use oracle::{annotate_oracle, annotate_oracle_node, mode_label, OracleConfig};
pub use prompt::{
    build_prompt, parse_response, sha256_hex, Prompt, EMPTY_TEXT, REASK_SUFFIX,
    SYSTEM_INSTRUCTION, TRUNCATION_MARKER,
};

use crate::error::{Error, Result};
use crate::graph::NodeTable;
use crate::sampling::Bundle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    Oracle,
    Llm,
}

/// Outcome of one bundle query. `label == None` marks a failed annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub bundle_id: usize,
    pub prompt_sha256: String,
    pub raw_response: String,
    pub label: Option<usize>,
    pub attempts: usize,
    pub annotator: AnnotatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub enum Annotator<'a> {
    Oracle {
        labels: &'a [usize],
        class_names: &'a [String],
        config: OracleConfig,
    },
    Llm {
        client: &'a LlmClient,
        table: &'a NodeTable,
        dataset_description: &'a str,
        cache: &'a AnnotationCache,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AnnotationSummary {
    pub records: Vec<AnnotationRecord>,
    pub labeled: usize,
    pub failed: usize,
}

/// Labels every bundle in place. Per-bundle failures leave `label` unset and
/// are reported in the summary rather than returned as errors.
pub fn annotate_all(bundles: &mut [Bundle], annotator: &Annotator<'_>) -> Result<AnnotationSummary> {
    let records = match annotator {
        Annotator::Oracle {
            labels,
            class_names,
            config,
        } => {
            config.validate()?;
            let c = class_names.len();
            bundles
                .iter()
                .map(|b| {
                    if let Some(&bad) = b.members.iter().find(|&&m| m >= labels.len()) {
                        return Err(Error::Invalid(format!(
                            "bundle {} member {bad} has no ground-truth label",
                            b.id
                        )));
                    }
                    let label = annotate_oracle(b, labels, c, config);
                    Ok(AnnotationRecord {
                        bundle_id: b.id,
                        prompt_sha256: String::new(),
                        raw_response: class_names[label].clone(),
                        label: Some(label),
                        attempts: 1,
                        annotator: AnnotatorKind::Oracle,
                        error: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
        Annotator::Llm {
            client,
            table,
            dataset_description,
            cache,
        } => {
            let max_chars = client.config().max_chars_per_item;
            let prompts = bundles
                .iter()
                .map(|b| build_prompt(b, table, dataset_description, max_chars))
                .collect::<Result<Vec<_>>>()?;
            query_parallel(&prompts, client, &table.class_names, cache)?
        }
    };

    let mut labeled = 0;
    for (bundle, record) in bundles.iter_mut().zip(&records) {
        bundle.label = record.label;
        labeled += usize::from(record.label.is_some());
    }
    Ok(AnnotationSummary {
        failed: records.len() - labeled,
        labeled,
        records,
    })
}

fn query_parallel(
    prompts: &[Prompt],
    client: &LlmClient,
    class_names: &[String],
    cache: &AnnotationCache,
) -> Result<Vec<AnnotationRecord>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<AnnotationRecord>>>> =
        prompts.iter().map(|_| Mutex::new(None)).collect();
    let workers = client.config().parallelism.min(prompts.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(prompt) = prompts.get(i) else { break };
                let out = annotate_llm(prompt, client, class_names, cache);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every prompt is visited"))
        .collect()
}
