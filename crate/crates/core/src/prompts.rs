//! Prompt texts for the four pipeline roles and the answerer.
//!
//! These are original wordings; treat them as tunable, not canonical.

use crate::model::{render_transcript, Message, SemanticFact};

pub const BOUNDARY_SYSTEM: &str = "\
You split a running conversation into episodes. Decide whether the NEW MESSAGE \
starts a new episode relative to the CONVERSATION SO FAR.
Weigh these signals:
- contextual coherence: is the new message about the same subject as the recent messages?
- temporal markers such as \"by the way\", \"anyway\", \"speaking of\", or a large gap between timestamps;
- shifts in intent, e.g. from asking for information to making a decision or changing plans;
- structural signals such as greetings, farewells or a closed question being answered.
Respond with a single JSON object and nothing else:
{\"is_boundary\": true or false, \"confidence\": number between 0 and 1}";

pub const EPISODE_SYSTEM: &str = "\
You turn a conversation segment into an episodic memory.
Write:
- \"title\": a short phrase naming the core theme of the segment;
- \"narrative\": a third-person account of what happened, written as an observer \
(\"The user ...\", \"The assistant ...\"). Keep names, numbers, places, preferences, \
decisions and plans. Resolve every relative time expression against the message \
timestamps and write absolute dates (a message sent on 2023-06-16 saying \
\"yesterday\" refers to June 15, 2023).
Respond with a single JSON object and nothing else: {\"title\": string, \"narrative\": string}";

pub const PREDICT_SYSTEM: &str = "\
You anticipate the content of a conversation before seeing it. Given only the \
episode title and the knowledge already held about the user, describe in a short \
paragraph what the conversation most likely contained. Base the prediction on the \
known facts; do not invent specifics that the facts do not support.";

pub const DISTILL_SYSTEM: &str = "\
You compare a PREDICTION of a conversation with the ORIGINAL CONVERSATION and \
extract what the prediction missed or got wrong. Output new knowledge as \
self-contained declarative statements that can be understood without the \
conversation (use names rather than pronouns, and absolute dates instead of \
relative ones such as \"yesterday\" or \"last week\", resolved against the \
message timestamps). Include only durable facts about people, preferences, \
events, plans and relationships. If the prediction already covers everything, \
return an empty array.
Respond with a JSON array of strings and nothing else.";

pub const EXTRACT_SYSTEM: &str = "\
You extract durable knowledge from a conversation. Output self-contained \
declarative statements about people, preferences, events, plans and \
relationships, using names instead of pronouns and absolute dates resolved \
against the message timestamps. Return an empty array if there is nothing worth \
keeping.
Respond with a JSON array of strings and nothing else.";

pub const ANSWER_SYSTEM: &str = "\
You answer questions about past conversations using only the memory context \
provided. Episodes are listed most relevant first; knowledge statements are \
distilled facts. Prefer absolute dates. Answer concisely, in a short phrase \
where possible. If the context does not contain the answer, say so.";

pub fn boundary_user(new_message: &Message, context: &[Message], omitted: usize) -> String {
    let mut out = String::from("CONVERSATION SO FAR:\n");
    if omitted > 0 {
        out.push_str(&format!("[... {omitted} earlier messages omitted ...]\n"));
    }
    out.push_str(&render_transcript(context));
    out.push_str("\n\nNEW MESSAGE:\n");
    out.push_str(&new_message.render_line());
    out
}

pub fn episode_user(segment: &[Message]) -> String {
    format!("CONVERSATION SEGMENT:\n{}", render_transcript(segment))
}

pub fn predict_user(title: &str, relevant: &[SemanticFact]) -> String {
    let mut out = format!("EPISODE TITLE: {title}\n\nKNOWN FACTS:\n");
    if relevant.is_empty() {
        out.push_str("(no prior knowledge exists)");
    } else {
        let lines: Vec<String> = relevant
            .iter()
            .map(|f| format!("- {}", f.statement.trim()))
            .collect();
        out.push_str(&lines.join("\n"));
    }
    out
}

pub fn distill_user(prediction: &str, segment: &[Message]) -> String {
    format!(
        "PREDICTION:\n{}\n\nORIGINAL CONVERSATION:\n{}",
        prediction.trim(),
        render_transcript(segment)
    )
}

pub fn extract_user(segment: &[Message]) -> String {
    format!("CONVERSATION:\n{}", render_transcript(segment))
}

pub fn answer_user(context: &str, question: &str) -> String {
    format!("{context}\nQUESTION: {question}\nANSWER:")
}
