#include "stylemine/models.hpp"

namespace stylemine::models {

void NetConfig::validate() const {
  if (channels < 4 || channels % 2 != 0) throw ContractError("NetConfig: channels must be even and >= 4");
  if (latent < 1) throw ContractError("NetConfig: latent must be >= 1");
  if (classes < 2) throw ContractError("NetConfig: classes must be >= 2");
  if (penultimate < 1) throw ContractError("NetConfig: penultimate must be >= 1");
  if (side < 8 || side % 4 != 0) throw ContractError("NetConfig: side must be >= 8 and divisible by 4");
  if (vae_hidden < 1) throw ContractError("NetConfig: vae_hidden must be >= 1");
}

}  // namespace stylemine::models
