#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "fundus/checkpoint.hpp"
#include "fundus/error.hpp"
#include "fundus/vit.hpp"

using namespace fundus;

namespace {

std::string bytes(std::initializer_list<int> v) {
    std::string s;
    for (int b : v) s.push_back(char(b));
    return s;
}

io::Checkpoint sample_checkpoint() {
    io::Checkpoint c;
    c.header["stage"] = "vit";
    c.header["seed"] = "7";
    c.arrays.push_back({"a", {2, 3}, 4, {1, 2, 3, 4, 5, 6}});
    c.arrays.push_back({"b", {}, 8, {0.1}});
    return c;
}

}  // namespace

TEST(Fnv1a, PublishedVectors) {
    EXPECT_EQ(io::fnv1a64("", 0), 0xcbf29ce484222325ULL);
    EXPECT_EQ(io::fnv1a64("a", 1), 0xaf63dc4c8601ec8cULL);
    EXPECT_EQ(io::fnv1a64("foobar", 6), 0x85944171f73967e8ULL);
}

TEST(TensorFormat, ByteLayoutFloat) {
    std::ostringstream out;
    io::write_tensor(out, ad::Tensor<float>::from({2}, {1.0f, -2.0f}));
    const auto expect = bytes({1, 0, 0, 0,                     // rank
                               2, 0, 0, 0, 0, 0, 0, 0,         // extent
                               4,                              // width
                               0x00, 0x00, 0x80, 0x3f,         // 1.0f
                               0x00, 0x00, 0x00, 0xc0});       // -2.0f
    EXPECT_EQ(out.str(), expect);
}

TEST(TensorFormat, ByteLayoutDoubleScalar) {
    std::ostringstream out;
    io::write_tensor(out, ad::Tensor<double>::scalar(1.0));
    EXPECT_EQ(out.str(), bytes({0, 0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 0xf0, 0x3f}));
}

TEST(TensorFormat, RoundTrip) {
    std::mt19937_64 rng(1);
    const auto t = ad::Tensor<double>::randn({3, 1, 4}, rng);
    std::stringstream s;
    io::write_tensor(s, t);
    const auto back = io::read_tensor<double>(s);
    EXPECT_EQ(back.shape(), t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(back.data()[i], t.data()[i]);
}

TEST(TensorFormat, TruncatedStreamThrows) {
    std::ostringstream out;
    io::write_tensor(out, ad::Tensor<float>::from({2}, {1.0f, -2.0f}));
    std::istringstream in(out.str().substr(0, 15));
    EXPECT_THROW(io::read_tensor<float>(in), DataError);
}

TEST(Checkpoint, HeaderLayout) {
    io::Checkpoint c;
    c.header["k"] = "v";
    const auto enc = io::encode(c);
    const auto body = std::string("FNDSCKPT") + bytes({1, 0, 0, 0, 4, 0, 0, 0}) + "k=v\n" + bytes({0, 0, 0, 0});
    ASSERT_EQ(enc.size(), body.size() + 8);
    EXPECT_EQ(enc.substr(0, body.size()), body);
    const auto sum = io::fnv1a64(body.data(), body.size());
    for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(std::uint8_t(enc[body.size() + i]), (sum >> (8 * i)) & 0xff);
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto c = sample_checkpoint();
    const auto d = io::decode(io::encode(c));
    EXPECT_EQ(d.header, c.header);
    ASSERT_EQ(d.arrays.size(), 2u);
    EXPECT_EQ(d.arrays[0].shape, (ad::Shape{2, 3}));
    EXPECT_EQ(d.arrays[0].values, c.arrays[0].values);
    EXPECT_EQ(d.arrays[1].values[0], 0.1);
    EXPECT_EQ(io::encode(d), io::encode(c));
}

TEST(Checkpoint, CorruptionDetected) {
    auto enc = io::encode(sample_checkpoint());
    for (std::size_t pos : {std::size_t(9), enc.size() / 2, enc.size() - 1}) {
        auto bad = enc;
        bad[pos] = char(bad[pos] ^ 0x10);
        EXPECT_THROW(io::decode(bad), DataError) << pos;
    }
    EXPECT_THROW(io::decode(enc.substr(0, enc.size() - 3)), DataError);
    auto magic = enc;
    magic[0] = 'X';
    EXPECT_THROW(io::decode(magic), DataError);
}

TEST(Checkpoint, RejectsNewlineInHeader) {
    io::Checkpoint c;
    c.header["k"] = "a\nb";
    EXPECT_THROW(io::encode(c), DomainError);
}

TEST(Checkpoint, FileRoundTripAndChecksum) {
    const auto path = std::filesystem::temp_directory_path() / "fundus_ckpt_test.bin";
    const auto c = sample_checkpoint();
    io::write_checkpoint(path, c);
    const auto d = io::read_checkpoint(path);
    EXPECT_EQ(io::checksum(d), io::checksum(c));
    std::filesystem::remove(path);
    EXPECT_THROW(io::read_checkpoint(path), DataError);
}

TEST(Checkpoint, ParamsRoundTrip) {
    vit::ViT<float> a({16, 8, 8, 1, 2, 2, 3}, 1), b({16, 8, 8, 1, 2, 2, 3}, 2);
    io::Checkpoint c;
    io::store_params(c, "clf.", a.params());
    io::load_params(c, "clf.", b.params());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        const auto& pa = a.params().items()[i].tensor;
        const auto& pb = b.params().items()[i].tensor;
        for (std::size_t k = 0; k < pa.numel(); ++k) ASSERT_EQ(pa.data()[k], pb.data()[k]);
    }
    vit::ViT<float> other({16, 8, 16, 1, 2, 2, 3}, 3);
    EXPECT_THROW(io::load_params(c, "clf.", other.params()), DataError);
    EXPECT_THROW(io::load_params(c, "x.", b.params()), DataError);
}

TEST(Checkpoint, AdamResumeIsExact) {
    const vit::ViTConfig cfg{16, 8, 8, 1, 2, 2, 2};
    std::mt19937_64 rng(4);
    const auto x = ad::Tensor<double>::uniform({4, 3, 16, 16}, rng, 0.0, 1.0);
    const std::vector<int> y{0, 1, 1, 0};
    auto train = [&](vit::ViT<double>& m, optim::Adam<double>& adam, int steps) {
        for (int s = 0; s < steps; ++s) {
            vit::classification_loss(m.forward(x), y).backward();
            adam.step(1e-2);
            m.params().zero_grad();
        }
    };
    vit::ViT<double> straight(cfg, 5);
    optim::Adam<double> adam_s(straight.params());
    train(straight, adam_s, 6);

    vit::ViT<double> first(cfg, 5);
    optim::Adam<double> adam_f(first.params());
    train(first, adam_f, 3);
    io::Checkpoint c;
    io::store_params(c, "", first.params());
    io::store_adam(c, "clf", adam_f, first.params());
    const auto restored = io::decode(io::encode(c));

    vit::ViT<double> resumed(cfg, 99);
    optim::Adam<double> adam_r(resumed.params());
    io::load_params(restored, "", resumed.params());
    io::load_adam(restored, "clf", adam_r, resumed.params());
    EXPECT_EQ(adam_r.step_count(), 3u);
    train(resumed, adam_r, 3);
    for (std::size_t i = 0; i < straight.params().size(); ++i) {
        const auto& a = straight.params().items()[i].tensor;
        const auto& b = resumed.params().items()[i].tensor;
        for (std::size_t k = 0; k < a.numel(); ++k) ASSERT_EQ(a.data()[k], b.data()[k]);
    }
}
