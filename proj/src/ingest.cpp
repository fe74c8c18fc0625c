#include "trajekt/ingest.hpp"

#include <algorithm>
#include <fstream>

#include "trajekt/csv.hpp"
#include "json.hpp"

namespace trajekt {

std::string to_string(Sex s) {
  switch (s) {
    case Sex::male: return "M";
    case Sex::female: return "F";
    default: return "unknown";
  }
}

std::string to_string(Domain d) {
  switch (d) {
    case Domain::condition: return "condition";
    case Domain::drug: return "drug";
    case Domain::procedure: return "procedure";
    default: return "observation";
  }
}

static Sex parse_sex(const std::string& s, const std::string& ctx) {
  if (s == "M") return Sex::male;
  if (s == "F") return Sex::female;
  if (s == "unknown") return Sex::unknown;
  throw data_error(ctx + ": bad sex '" + s + "' (expected M, F or unknown)");
}

static Domain parse_domain(const std::string& s, const std::string& ctx) {
  if (s == "condition") return Domain::condition;
  if (s == "drug") return Domain::drug;
  if (s == "procedure") return Domain::procedure;
  if (s == "observation") return Domain::observation;
  throw data_error(ctx + ": bad domain '" + s + "'");
}

static Date parse_date_or_throw(const std::string& s, const std::string& ctx) {
  auto d = parse_date(s);
  if (!d) throw data_error(ctx + ": bad date '" + s + "'");
  return *d;
}

void EventLog::finalize() {
  person_row.clear();
  visits_of.clear();
  events_of.clear();
  measurements_of.clear();
  for (size_t i = 0; i < persons.size(); ++i) person_row[persons[i].person_id] = i;
  for (size_t i = 0; i < visits.size(); ++i) visits_of[visits[i].person_id].push_back(i);
  for (size_t i = 0; i < events.size(); ++i) events_of[events[i].person_id].push_back(i);
  for (size_t i = 0; i < measurements.size(); ++i)
    measurements_of[measurements[i].person_id].push_back(i);
}

const Person& EventLog::person(PersonId id) const {
  auto it = person_row.find(id);
  if (it == person_row.end())
    throw data_error("unknown person_id " + std::to_string(id));
  return persons[it->second];
}

const std::set<ConceptId>& ConceptSets::set_or_empty(const std::string& name) const {
  static const std::set<ConceptId> empty;
  auto it = sets.find(name);
  return it == sets.end() ? empty : it->second;
}

bool ConceptSets::in_set(const std::string& name, ConceptId c) const {
  const auto& s = set_or_empty(name);
  return s.count(c) > 0;
}

const std::vector<ConceptId> Ontology::kEmpty;

void Ontology::add_edge(ConceptId child, ConceptId parent) {
  edges_[child].push_back(parent);
}

void Ontology::finalize() {
  ancestors_.clear();
  // iterative DFS with color marks; a back edge exposes one cycle
  std::unordered_map<ConceptId, int> color;  // 0 unseen, 1 on stack, 2 done
  for (const auto& [root, _] : edges_) {
    if (color[root] == 2) continue;
    std::vector<std::pair<ConceptId, size_t>> stack{{root, 0}};
    std::vector<ConceptId> path{root};
    color[root] = 1;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      auto it = edges_.find(node);
      size_t degree = it == edges_.end() ? 0 : it->second.size();
      if (next < degree) {
        ConceptId parent = it->second[next++];
        int c = color[parent];
        if (c == 1) {
          std::string cycle = std::to_string(parent);
          for (auto rit = path.rbegin(); rit != path.rend(); ++rit) {
            cycle += " -> " + std::to_string(*rit);
            if (*rit == parent) break;
          }
          throw config_error("ontology cycle: " + cycle);
        }
        if (c == 0) {
          color[parent] = 1;
          stack.emplace_back(parent, 0);
          path.push_back(parent);
        }
      } else {
        // all parents resolved: union their ancestor sets
        std::set<ConceptId> anc;
        if (it != edges_.end()) {
          for (ConceptId p : it->second) {
            anc.insert(p);
            for (ConceptId a : ancestors(p)) anc.insert(a);
          }
        }
        ancestors_[node] = std::vector<ConceptId>(anc.begin(), anc.end());
        color[node] = 2;
        stack.pop_back();
        path.pop_back();
      }
    }
  }
}

const std::vector<ConceptId>& Ontology::ancestors(ConceptId c) const {
  auto it = ancestors_.find(c);
  return it == ancestors_.end() ? kEmpty : it->second;
}

EventLog load_event_log(const EventLogPaths& paths, LoadReport* report) {
  EventLog log;

  {
    CsvTable t = read_csv(paths.persons);
    int c_id = t.require_col("person_id", paths.persons);
    int c_bd = t.require_col("birth_date", paths.persons);
    int c_sex = t.require_col("sex", paths.persons);
    int c_race = t.require_col("race", paths.persons);
    int c_eth = t.require_col("ethnicity", paths.persons);
    int c_dd = t.require_col("death_date", paths.persons);
    for (size_t r = 0; r < t.rows.size(); ++r) {
      std::string ctx = paths.persons + " row " + std::to_string(r + 2);
      const auto& row = t.rows[r];
      Person p;
      p.person_id = parse_int(row[c_id], ctx);
      p.birth_date = parse_date_or_throw(row[c_bd], ctx);
      p.sex = parse_sex(row[c_sex], ctx);
      p.race = row[c_race];
      p.ethnicity = row[c_eth];
      if (!row[c_dd].empty()) p.death_date = parse_date_or_throw(row[c_dd], ctx);
      log.persons.push_back(std::move(p));
    }
  }
  log.finalize();
  auto check_person = [&](PersonId id, const std::string& ctx) {
    if (!log.person_row.count(id))
      throw data_error(ctx + ": person_id " + std::to_string(id) + " not in persons table");
  };

  {
    CsvTable t = read_csv(paths.visits);
    int c_vid = t.require_col("visit_id", paths.visits);
    int c_pid = t.require_col("person_id", paths.visits);
    int c_sd = t.require_col("start_date", paths.visits);
    int c_ed = t.require_col("end_date", paths.visits);
    for (size_t r = 0; r < t.rows.size(); ++r) {
      std::string ctx = paths.visits + " row " + std::to_string(r + 2);
      const auto& row = t.rows[r];
      Visit v;
      v.visit_id = parse_int(row[c_vid], ctx);
      v.person_id = parse_int(row[c_pid], ctx);
      check_person(v.person_id, ctx);
      v.start_date = parse_date_or_throw(row[c_sd], ctx);
      v.end_date = parse_date_or_throw(row[c_ed], ctx);
      if (v.end_date < v.start_date)
        throw data_error(ctx + ": end_date before start_date");
      log.visits.push_back(v);
    }
  }

  {
    CsvTable t = read_csv(paths.events);
    int c_pid = t.require_col("person_id", paths.events);
    int c_date = t.require_col("date", paths.events);
    int c_dom = t.require_col("domain", paths.events);
    int c_cid = t.require_col("concept_id", paths.events);
    for (size_t r = 0; r < t.rows.size(); ++r) {
      std::string ctx = paths.events + " row " + std::to_string(r + 2);
      const auto& row = t.rows[r];
      Event e;
      e.person_id = parse_int(row[c_pid], ctx);
      check_person(e.person_id, ctx);
      e.date = parse_date_or_throw(row[c_date], ctx);
      e.domain = parse_domain(row[c_dom], ctx);
      e.concept_id = parse_int(row[c_cid], ctx);
      log.events.push_back(e);
    }
  }

  {
    CsvTable t = read_csv(paths.measurements);
    int c_pid = t.require_col("person_id", paths.measurements);
    int c_dt = t.require_col("datetime", paths.measurements);
    int c_cid = t.require_col("concept_id", paths.measurements);
    int c_val = t.require_col("value", paths.measurements);
    int c_unit = t.require_col("unit", paths.measurements);
    for (size_t r = 0; r < t.rows.size(); ++r) {
      std::string ctx = paths.measurements + " row " + std::to_string(r + 2);
      const auto& row = t.rows[r];
      Measurement m;
      m.person_id = parse_int(row[c_pid], ctx);
      check_person(m.person_id, ctx);
      auto dt = parse_datetime(row[c_dt]);
      if (!dt) throw data_error(ctx + ": bad datetime '" + row[c_dt] + "'");
      m.datetime = *dt;
      m.concept_id = parse_int(row[c_cid], ctx);
      m.value = parse_double(row[c_val], ctx);
      m.unit = row[c_unit];
      log.measurements.push_back(std::move(m));
    }
  }

  log.finalize();
  if (report) {
    report->persons = log.persons.size();
    report->visits = log.visits.size();
    report->events = log.events.size();
    report->measurements = log.measurements.size();
  }
  return log;
}

void export_event_log(const EventLog& log, const EventLogPaths& paths) {
  {
    CsvWriter w(paths.persons,
                {"person_id", "birth_date", "sex", "race", "ethnicity", "death_date"});
    for (const auto& p : log.persons)
      w.write_row({std::to_string(p.person_id), format_date(p.birth_date),
                   to_string(p.sex), p.race, p.ethnicity,
                   p.death_date ? format_date(*p.death_date) : ""});
  }
  {
    CsvWriter w(paths.visits, {"visit_id", "person_id", "start_date", "end_date"});
    for (const auto& v : log.visits)
      w.write_row({std::to_string(v.visit_id), std::to_string(v.person_id),
                   format_date(v.start_date), format_date(v.end_date)});
  }
  {
    CsvWriter w(paths.events, {"person_id", "date", "domain", "concept_id"});
    for (const auto& e : log.events)
      w.write_row({std::to_string(e.person_id), format_date(e.date),
                   to_string(e.domain), std::to_string(e.concept_id)});
  }
  {
    CsvWriter w(paths.measurements, {"person_id", "datetime", "concept_id", "value", "unit"});
    for (const auto& m : log.measurements)
      w.write_row({std::to_string(m.person_id), format_datetime(m.datetime),
                   std::to_string(m.concept_id), fmt_double(m.value), m.unit});
  }
}

void load_concept_sets(const std::string& concepts_path, const std::string& ontology_path,
                       ConceptSets& sets, Ontology& onto) {
  std::ifstream in(concepts_path);
  if (!in) throw config_error("cannot open " + concepts_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw config_error(concepts_path + ": " + e.what());
  }

  sets = ConceptSets{};
  if (!j.contains("concept_sets") || !j["concept_sets"].is_object())
    throw config_error(concepts_path + ": missing 'concept_sets' object");
  for (auto& [name, ids] : j["concept_sets"].items()) {
    auto& dst = sets.sets[name];
    for (const auto& id : ids) dst.insert(id.get<ConceptId>());
  }
  for (const char* required : {"aki", "ckd"})
    if (!sets.sets.count(required))
      throw config_error(concepts_path + ": required concept set '" +
                         std::string(required) + "' is missing");

  if (j.contains("severity_panel")) {
    for (auto& [cid, var] : j["severity_panel"].items())
      sets.severity_panel[std::stoll(cid)] = var.get<std::string>();
  }
  if (j.contains("valid_ranges")) {
    for (auto& [var, r] : j["valid_ranges"].items()) {
      ValueRange vr{r.at("lo").get<double>(), r.at("hi").get<double>(),
                    r.value("unit", std::string())};
      if (!(vr.lo < vr.hi))
        throw config_error(concepts_path + ": range for '" + var + "' must have lo < hi");
      sets.valid_ranges[var] = vr;
    }
  }
  if (j.contains("disease_groups")) {
    for (auto& [group, ids] : j["disease_groups"].items()) {
      auto& dst = sets.disease_groups[group];
      for (const auto& id : ids) dst.insert(id.get<ConceptId>());
    }
  }

  onto = Ontology{};
  if (!ontology_path.empty()) {
    CsvTable t = read_csv(ontology_path);
    int c_child = t.require_col("child_concept", ontology_path);
    int c_parent = t.require_col("parent_concept", ontology_path);
    for (size_t r = 0; r < t.rows.size(); ++r) {
      std::string ctx = ontology_path + " row " + std::to_string(r + 2);
      onto.add_edge(parse_int(t.rows[r][c_child], ctx), parse_int(t.rows[r][c_parent], ctx));
    }
  }
  onto.finalize();
}

}  // namespace trajekt
