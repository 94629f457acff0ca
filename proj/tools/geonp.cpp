#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "geonp/cli/commands.hpp"
#include "geonp/cli/config.hpp"

// geonp: interpolate sparse biomass shots onto dense grids with calibrated
// uncertainty. Subcommands cover the whole desk-scale loop: synthesize a
// landscape, train a model, evaluate it against the baselines, render maps
// and adapt to a new region with a handful of tiles.

namespace {

struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
};

void add_common(CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config_path, "JSON run configuration (defaults when omitted)");
    sub->add_option("--seed", args.seed, "master seed for every stochastic choice");
    sub->add_option("--out", args.out_dir, "output directory")->required();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"geospatial neural-process interpolation with calibrated uncertainty"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string train_model = "anp";
    std::string eval_model = "all";
    std::string map_model = "anp";
    std::vector<std::string> map_tiles;
    double grid_step = 0.01;
    std::size_t ft_tiles = 10;
    std::size_t ft_epochs = 5;

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic landscape CSV");
    add_common(synth, args);

    CLI::App* train = app.add_subcommand("train", "fit a model on the train split");
    add_common(train, args);
    train->add_option("--model", train_model, "anp, rf, gbq or mlp");

    CLI::App* eval = app.add_subcommand("eval", "score models on the val and test splits");
    add_common(eval, args);
    eval->add_option("--model", eval_model, "anp, rf, gbq, mlp, idw or all");

    CLI::App* map = app.add_subcommand("map", "render per-tile prediction grids");
    add_common(map, args);
    map->add_option("--model", map_model, "only anp renders maps");
    map->add_option("--tiles", map_tiles, "tile selectors formatted row,col (default: all)");
    map->add_option("--grid-step", grid_step, "grid spacing in degrees");

    CLI::App* finetune = app.add_subcommand("finetune", "adapt a checkpoint to a new region");
    add_common(finetune, args);
    finetune->add_option("--n-tiles", ft_tiles, "tiles sampled for adaptation");
    finetune->add_option("--epochs", ft_epochs, "adaptation epochs (0 keeps weights untouched)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        geonp::cli::RunConfig cfg = geonp::cli::load_run_config(args.config_path);
        if (synth->parsed()) return geonp::cli::cmd_synth(cfg, args.seed, args.out_dir);
        if (train->parsed()) return geonp::cli::cmd_train(cfg, args.seed, args.out_dir, train_model);
        if (eval->parsed()) return geonp::cli::cmd_eval(cfg, args.seed, args.out_dir, eval_model);
        if (map->parsed())
            return geonp::cli::cmd_map(cfg, args.seed, args.out_dir, map_model, map_tiles,
                                       grid_step);
        if (finetune->parsed())
            return geonp::cli::cmd_finetune(cfg, args.seed, args.out_dir, ft_tiles, ft_epochs);
    } catch (const geonp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const geonp::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const geonp::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
