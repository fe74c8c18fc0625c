#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "trajekt/common.hpp"
#include "trajekt/date.hpp"

namespace trajekt {

using PersonId = int64_t;
using VisitId = int64_t;
using ConceptId = int64_t;

enum class Sex { male, female, unknown };
enum class Domain { condition, drug, procedure, observation };

std::string to_string(Sex s);
std::string to_string(Domain d);

struct Person {
  PersonId person_id;
  Date birth_date;
  Sex sex;
  std::string race;
  std::string ethnicity;
  std::optional<Date> death_date;
  bool operator==(const Person&) const = default;
};

struct Visit {
  VisitId visit_id;
  PersonId person_id;
  Date start_date;
  Date end_date;
  bool operator==(const Visit&) const = default;
};

struct Event {
  PersonId person_id;
  Date date;
  Domain domain;
  ConceptId concept_id;
  bool operator==(const Event&) const = default;
};

struct Measurement {
  PersonId person_id;
  DateTime datetime;
  ConceptId concept_id;
  double value;
  std::string unit;
  bool operator==(const Measurement&) const = default;
};

// Normalized longitudinal record store. Immutable after load; any number of
// workers may read it concurrently.
struct EventLog {
  std::vector<Person> persons;
  std::vector<Visit> visits;
  std::vector<Event> events;
  std::vector<Measurement> measurements;

  // per-person row indexes, built once by finalize()
  std::unordered_map<PersonId, size_t> person_row;
  std::unordered_map<PersonId, std::vector<size_t>> visits_of;
  std::unordered_map<PersonId, std::vector<size_t>> events_of;
  std::unordered_map<PersonId, std::vector<size_t>> measurements_of;

  void finalize();
  const Person& person(PersonId id) const;

  bool operator==(const EventLog& o) const {
    return persons == o.persons && visits == o.visits && events == o.events &&
           measurements == o.measurements;
  }
};

struct ValueRange {
  double lo;
  double hi;
  std::string unit;
};

struct ConceptSets {
  std::map<std::string, std::set<ConceptId>> sets;
  std::map<ConceptId, std::string> severity_panel;   // measurement concept -> panel variable
  std::map<std::string, ValueRange> valid_ranges;    // panel variable -> plausible range
  std::map<std::string, std::set<ConceptId>> disease_groups;  // organ-system map for bands

  const std::set<ConceptId>& set_or_empty(const std::string& name) const;
  bool in_set(const std::string& name, ConceptId c) const;
};

// Directed concept hierarchy, child -> parent. All ancestor lists are
// precomputed at load so lookups are read-only afterwards.
class Ontology {
 public:
  void add_edge(ConceptId child, ConceptId parent);
  // throws config_error listing one cycle if the graph is cyclic
  void finalize();
  // transitive parents excluding the concept itself; empty for unknown ids
  const std::vector<ConceptId>& ancestors(ConceptId c) const;

  bool operator==(const Ontology& o) const { return edges_ == o.edges_; }

 private:
  std::map<ConceptId, std::vector<ConceptId>> edges_;
  std::unordered_map<ConceptId, std::vector<ConceptId>> ancestors_;
  static const std::vector<ConceptId> kEmpty;
};

struct EventLogPaths {
  std::string persons;
  std::string visits;
  std::string events;
  std::string measurements;
};

struct LoadReport {
  size_t persons = 0, visits = 0, events = 0, measurements = 0;
};

EventLog load_event_log(const EventLogPaths& paths, LoadReport* report = nullptr);
void export_event_log(const EventLog& log, const EventLogPaths& paths);

// Concept config is JSON; the ontology is a two-column CSV of edges.
void load_concept_sets(const std::string& concepts_path, const std::string& ontology_path,
                       ConceptSets& sets, Ontology& onto);

}  // namespace trajekt
