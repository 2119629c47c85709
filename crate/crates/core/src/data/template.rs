use super::{DataError, Direction};

/// Instruction layout for one direction. `{source}` and `{target}` are the
/// placeholders; `marker` ends the generation prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub direction: Direction,
    pub text: &'static str,
    pub marker: &'static str,
}

const MOL2LANG: &str = "Below is an instruction that describes a task, paired with an input that provides further context.\n\
Write a response that appropriately completes the request.\n\n\
### Instruction: You are a researcher. You can come up captions based on your existing knowledge.\n\
Captions are given against the following input. You should be as detailed as possible.\n\n\
### Input: Molecule: {source}\n\
In that molecule, could you formulate a caption about?\n\n\n\
### Response:{target}";

const LANG2MOL: &str = "Below is an instruction that describes a task, paired with an input that provides further context.\n\
Write a response that appropriately completes the request.\n\n\
### Instruction: You are a researcher. You can come up molecule smile strings based on your existing knowledge.\n\
Molecule smile strings are given against the following input. You should be as detailed as possible.\n\n\
### Input: Caption: {source}\n\
In that caption, could you generate a molecule smile string?\n\n\n\
### Response: {target}";

/// Every rendered prompt contains this; sources may not.
pub const RESPONSE_MARKER: &str = "### Response:";

pub fn template(direction: Direction) -> InstructionTemplate {
    match direction {
        Direction::Mol2Lang => InstructionTemplate { direction, text: MOL2LANG, marker: "### Response:" },
        Direction::Lang2Mol => InstructionTemplate { direction, text: LANG2MOL, marker: "### Response: " },
    }
}

/// Substitutes `source` (and `target`, if any). Without a target the result
/// ends exactly at the marker, which is also where loss masking starts.
pub fn render_instruction(t: &InstructionTemplate, source: &str, target: Option<&str>) -> Result<String, DataError> {
    if source.is_empty() {
        return Err(DataError::Contract("instruction source is empty".into()));
    }
    if source.contains(RESPONSE_MARKER) || target.is_some_and(|y| y.contains(RESPONSE_MARKER)) {
        return Err(DataError::Injectivity(format!("text contains the response marker {RESPONSE_MARKER:?}")));
    }
    let (head, _) = t.text.split_once("{target}").expect("template has a target slot");
    let prompt = head.replacen("{source}", source, 1);
    Ok(match target {
        Some(y) => prompt + y,
        None => prompt,
    })
}

/// Generation prompt for `source` under its direction's template.
pub fn prompt_for(direction: Direction, source: &str) -> Result<String, DataError> {
    render_instruction(&template(direction), source, None)
}

/// Text shared by every prompt of a direction, up to the source slot.
pub fn shared_prefix(direction: Direction) -> &'static str {
    template(direction).text.split_once("{source}").expect("template has a source slot").0
}
