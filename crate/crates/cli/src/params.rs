use fedyolo_core::peft::{ModuleKind, ModuleSpec};
use fedyolo_core::vit::{layout_count, ModelConfig};

use crate::error::Result;

/// Columns of the golden table.
pub const TABLE_PRESETS: [&str; 4] = ["vit_t", "vit_s", "vit_b", "vit_l"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Full,
    Head,
    Module(ModuleKind),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Self::Full,
            "head" | "header" | "head_only" => Self::Head,
            other => Self::Module(ModuleKind::parse(other)?),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::Head => "head",
            Self::Module(k) => k.as_str(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "Full",
            Self::Head => "Header",
            Self::Module(ModuleKind::Adapter) => "Adapter",
            Self::Module(ModuleKind::Lora) => "LoRA",
            Self::Module(ModuleKind::Prompt) => "VPT",
            Self::Module(ModuleKind::HeadOnly) => "Header",
        }
    }
}

/// Trainable (and communicated) parameters of `method` on `cfg`, with the
/// classifier head included.
pub fn count(cfg: &ModelConfig, method: Method) -> usize {
    match method {
        Method::Full => layout_count(cfg),
        Method::Head => cfg.head_params(),
        Method::Module(kind) => ModuleSpec::new(kind).count(cfg).with_head(),
    }
}

/// A table entry. The reference table lists the ViT-L adapter without its
/// head; that one cell is reproduced head-exclusive and marked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub value: usize,
    pub head_exclusive: bool,
}

pub fn table_cell(preset: &str, method: Method) -> Result<Cell> {
    let cfg = ModelConfig::preset(preset)?;
    Ok(if preset == "vit_l" && method == Method::Module(ModuleKind::Adapter) {
        Cell {
            value: ModuleSpec::new(ModuleKind::Adapter).count(&cfg).without_head(),
            head_exclusive: true,
        }
    } else {
        Cell {
            value: count(&cfg, method),
            head_exclusive: false,
        }
    })
}

pub const TABLE_METHODS: [Method; 5] = [
    Method::Full,
    Method::Head,
    Method::Module(ModuleKind::Adapter),
    Method::Module(ModuleKind::Lora),
    Method::Module(ModuleKind::Prompt),
];

pub fn golden_table() -> Vec<(Method, Vec<Cell>)> {
    TABLE_METHODS
        .iter()
        .map(|&m| {
            (
                m,
                TABLE_PRESETS
                    .iter()
                    .map(|p| table_cell(p, m).expect("table presets exist"))
                    .collect(),
            )
        })
        .collect()
}

/// `1234567` as `1,234,567`.
pub fn grouped(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn render_table() -> String {
    let rows = golden_table();
    let mut out = format!("{:<8}", "Method");
    for p in TABLE_PRESETS {
        out.push_str(&format!("{p:>14}"));
    }
    out.push('\n');
    for (m, cells) in rows {
        out.push_str(&format!("{:<8}", m.label()));
        for c in cells {
            let v = grouped(c.value) + if c.head_exclusive { "*" } else { " " };
            out.push_str(&format!("{v:>14}"));
        }
        out.truncate(out.trim_end().len());
        out.push('\n');
    }
    out.push_str("* head-exclusive; with its 102,500-parameter head the ViT-L adapter is 520,484\n");
    out
}

/// One preset/method line, with the backbone and head split out.
pub fn render_one(preset: &str, method: &str) -> Result<String> {
    let cfg = ModelConfig::preset(preset)?;
    let m = Method::parse(method)?;
    let total = count(&cfg, m);
    let head = cfg.head_params();
    let full = layout_count(&cfg);
    Ok(format!(
        "{preset} {}: {} trainable ({} head), {} frozen, full model {}",
        m.label(),
        grouped(total),
        grouped(head),
        grouped(if m == Method::Full { 0 } else { full - head }),
        grouped(full)
    ))
}
