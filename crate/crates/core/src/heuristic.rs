//! Rule-based question planner.
//!
//! Objects are pulled from the query with the lexicon. Living objects get an
//! action question then a scene question, non-living objects a scene question
//! only. With no object the user is first asked to name one. Ask Segment
//! repeats every question per half; Ask Object adds the inventory question.
//! A session never sees more than [`MAX_QUESTIONS`] questions.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{extract_objects, ObjectLexicon};
use crate::question::{
    action_question, scene_question, Question, QuestionKind, OBJECT_IDENTIFY_QUESTION,
    OBJECT_INVENTORY_QUESTION,
};
use crate::session::Augmentations;

pub const MAX_QUESTIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HeuristicError {
    #[error("answer is for {got:?}, but the last emitted question was {expected:?}")]
    StaleQuestion { expected: Option<String>, got: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionPlan {
    pending: VecDeque<Question>,
    emitted: Vec<Question>,
    /// The identify question is outstanding; nothing else is queued meanwhile.
    awaiting_object: bool,
    /// Inventory question held back until the identify answer arrives.
    deferred_inventory: bool,
    known_objects: BTreeSet<String>,
    augmentations: Augmentations,
}

fn object_questions(object: &str, living: bool) -> Vec<Question> {
    let mut qs = Vec::with_capacity(2);
    if living {
        qs.push(Question::new(action_question(object), QuestionKind::Action));
    }
    qs.push(Question::new(scene_question(object), QuestionKind::Scene));
    qs
}

fn inventory_question() -> Question {
    Question::new(OBJECT_INVENTORY_QUESTION, QuestionKind::ObjectInventory)
}

/// Initial plan for a query.
#[must_use]
pub fn plan_initial(query: &str, lexicon: &ObjectLexicon, augmentations: Augmentations) -> QuestionPlan {
    let mut plan = QuestionPlan {
        pending: VecDeque::new(),
        emitted: Vec::new(),
        awaiting_object: false,
        deferred_inventory: false,
        known_objects: BTreeSet::new(),
        augmentations,
    };
    let objects = extract_objects(query, lexicon);
    if objects.is_empty() {
        // The identify question always addresses the whole video.
        plan.pending
            .push_back(Question::new(OBJECT_IDENTIFY_QUESTION, QuestionKind::ObjectIdentify));
        plan.awaiting_object = true;
        plan.deferred_inventory = augmentations.ask_object;
        return plan;
    }
    let mut base = Vec::new();
    for (object, living) in objects {
        plan.known_objects.insert(object.clone());
        base.extend(object_questions(&object, living));
    }
    if augmentations.ask_object {
        base.push(inventory_question());
    }
    plan.enqueue(base);
    plan
}

impl QuestionPlan {
    /// The question that would be emitted next.
    #[must_use]
    pub fn peek(&self) -> Option<&Question> {
        if self.emitted.len() >= MAX_QUESTIONS {
            return None;
        }
        self.pending.front()
    }

    /// Emit the next question.
    pub fn emit(&mut self) -> Option<Question> {
        self.peek()?;
        let q = self.pending.pop_front()?;
        self.emitted.push(q.clone());
        Some(q)
    }

    #[must_use]
    pub fn is_exhausted(&self) -> bool {
        self.peek().is_none()
    }

    #[must_use]
    pub fn emitted(&self) -> &[Question] {
        &self.emitted
    }

    pub fn pending(&self) -> impl Iterator<Item = &Question> + '_ {
        self.pending.iter()
    }

    #[must_use]
    pub fn awaiting_object(&self) -> bool {
        self.awaiting_object
    }

    /// Feed the answer to the most recently emitted question.
    pub fn on_answer(
        &mut self,
        question: &Question,
        answer: &str,
        lexicon: &ObjectLexicon,
    ) -> Result<(), HeuristicError> {
        let last = self.emitted.last();
        if last != Some(question) {
            return Err(HeuristicError::StaleQuestion {
                expected: last.map(|q| q.text.clone()),
                got: question.text.clone(),
            });
        }
        match question.kind {
            QuestionKind::ObjectIdentify if self.awaiting_object => {
                self.awaiting_object = false;
                let mut base = self.new_object_questions(answer, lexicon);
                if std::mem::take(&mut self.deferred_inventory) {
                    base.push(inventory_question());
                }
                self.enqueue(base);
            }
            QuestionKind::ObjectInventory => {
                let base = self.new_object_questions(answer, lexicon);
                self.enqueue(base);
            }
            _ => {}
        }
        Ok(())
    }

    fn new_object_questions(&mut self, answer: &str, lexicon: &ObjectLexicon) -> Vec<Question> {
        let mut base = Vec::new();
        for (object, living) in extract_objects(answer, lexicon) {
            if self.known_objects.insert(object.clone()) {
                base.extend(object_questions(&object, living));
            }
        }
        base
    }

    /// Expand per half when Ask Segment is on, drop repeats and cut at the cap.
    fn enqueue(&mut self, base: Vec<Question>) {
        let expanded = base.into_iter().flat_map(|q| {
            if self.augmentations.ask_segment {
                q.per_half().to_vec()
            } else {
                vec![q]
            }
        });
        for q in expanded.collect::<Vec<_>>() {
            if self.emitted.len() + self.pending.len() >= MAX_QUESTIONS {
                break;
            }
            let seen = self
                .emitted
                .iter()
                .chain(self.pending.iter())
                .any(|o| o.text == q.text && o.segment == q.segment);
            if !seen {
                self.pending.push_back(q);
            }
        }
    }
}
