#include "emtal/checkpoint.hpp"

namespace emtal {

Json partition_to_json(const ExpertPartition& part) {
  return {{"K", part.K}, {"assignment", part.assignment}, {"permutation", part.permutation}};
}

ExpertPartition partition_from_json(const Json& j, int expected_H) {
  if (!j.is_object() || !j.contains("permutation"))
    throw CorruptionError("partition meta is missing 'permutation'");
  if (!j.contains("assignment")) throw CorruptionError("partition meta is missing 'assignment'");
  if (!j.contains("K")) throw CorruptionError("partition meta is missing 'K'");
  ExpertPartition part;
  try {
    part.K = j.at("K").get<int>();
    part.assignment = j.at("assignment").get<std::vector<int>>();
    part.permutation = j.at("permutation").get<std::vector<int>>();
  } catch (const Json::exception& e) {
    throw CorruptionError(std::string("partition meta is malformed: ") + e.what());
  }
  if (part.H() != expected_H) throw CorruptionError("partition length differs from H");
  part.validate();
  return part;
}

}  // namespace emtal
